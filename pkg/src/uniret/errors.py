"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto the
documented process exit codes without a lookup table.
"""

from __future__ import annotations


class UniretError(Exception):
    exit_code = 1


class UsageError(UniretError):
    exit_code = 2


class DataError(UniretError):
    exit_code = 3


class StorageError(UniretError):
    """File-level IO or binary format problem."""

    exit_code = 4


class NumericError(UniretError):
    exit_code = 5


# -- records / datastore -----------------------------------------------------


class MalformedLine(DataError):
    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        msg = f"malformed record at line {line_no}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class MissingDocId(DataError):
    pass


class NoPayload(DataError):
    pass


class InvalidMediaPath(DataError):
    pass


class OverlappingPosNeg(DataError):
    pass


class DocIdContentConflict(DataError):
    def __init__(self, docid: str):
        self.docid = docid
        super().__init__(f"docid {docid!r} appears with different content")


class DuplicateDocId(DataError):
    def __init__(self, docid: str):
        self.docid = docid
        super().__init__(f"duplicate docid {docid!r}")


class DanglingDocId(DataError):
    def __init__(self, docid: str, query_id: str | None = None):
        self.docid = docid
        where = f" (query {query_id!r})" if query_id is not None else ""
        super().__init__(f"docid {docid!r} not found in corpus{where}")


class EmptyCorpusFallback(DataError):
    pass


class EmptyDataset(DataError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"dataset {name!r} has no usable training queries")


class EmptyContent(DataError):
    pass


class DuplicateJudgment(DataError):
    def __init__(self, qid: str, docid: str, line_no: int | None = None):
        self.qid, self.docid = qid, docid
        at = f" at line {line_no}" if line_no is not None else ""
        super().__init__(f"duplicate judgment ({qid}, {docid}){at}")


# -- binary files ------------------------------------------------------------


class MediaReadError(StorageError):
    def __init__(self, path: str, cause: Exception | None = None):
        self.path = path
        super().__init__(f"cannot read media file {path!r}: {cause}")


class BadMagic(StorageError):
    pass


class VersionMismatch(StorageError):
    pass


class TruncatedFile(StorageError):
    pass


class CountMismatch(StorageError):
    pass


# -- numerics ----------------------------------------------------------------


class DegenerateEmbedding(NumericError):
    pass


class DegeneratePrefix(NumericError):
    pass
