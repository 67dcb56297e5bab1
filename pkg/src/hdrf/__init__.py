"""hdrf: HDR radiance fields trained from multi-exposure LDR views.

Train two coupled implicit functions (a radiance field and a per-channel tone
mapper) on LDR images with known exposure times, then render novel LDR views
at arbitrary exposure and novel HDR views. Includes a synthetic ground-truth
pipeline and a classical response-calibration oracle for verification.
"""

__version__ = "0.1.0"
