"""Brain-vision alignment with multi-encoder fusion, a contrastive
brain-to-fusion objective, and a pretrained-style fusion prior, plus the
synthetic verification harness around them."""

from . import align, brainproj, databank, errors, evalsuite, fusion, gradcheck, ndgrad, optim, prior, trainer

__version__ = "0.1.0"
