"""Decoupled-data dense retrieval at desk scale.

Modules: ``records`` (v1/v2 training data), ``datastore`` (corpus store,
batching), ``featurize`` (hashed byte trigrams), ``model`` (MRL contrastive
training), ``index`` (exact search), ``mine`` (hard negatives),
``evaluation`` (nDCG / Recall), ``cli``.
"""

__version__ = "0.1.0"
