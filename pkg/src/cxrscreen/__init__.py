"""Chest radiograph screening pipeline with synthetic dataset-bias audits.

Modules: ``imgcore`` (image buffers and I/O), ``enhance`` (CLAHE),
``markers`` and ``inpaint`` (burned-in marker removal), ``dataset``
(manifests, subsets, splits, class weights), ``trainer`` (reference
softmax classifier), ``metrics`` (fold reports), ``synth`` (synthetic
radiographs) and ``experiments`` (bias audits).
"""

__version__ = "0.1.0"
