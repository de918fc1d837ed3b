"""Cross-modal transformer for emotion recognition.

Three modality encoders (visual, acoustic, text) feed a cross-modal
attention fusion block and an emotion classifier. The package also ships
data-parallel training, a socket-based multi-stage serving pipeline, and a
CLI (``cmt``).
"""

__version__ = "0.1.0"
