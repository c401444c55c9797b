"""MRI-based amyloid status prediction pipeline on NumPy/SciPy.

Modules: ``nifti`` (I/O), ``volume``/``registration`` (preprocessing),
``quant`` (SUVR and centiloid), ``cohort`` (manifests and splits),
``network`` (3D MBConv classifier), ``metrics``/``report`` (evaluation),
``occlusion`` (activation maps), ``phantom`` (synthetic cohorts) and
``cli``.
"""

__version__ = "0.1.0"
