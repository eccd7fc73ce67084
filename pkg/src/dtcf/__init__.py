"""Speaker-verification toolkit built on a small numpy autodiff engine.

Subpackages:
    tensor     -- dense tensors with reverse-mode autodiff and grad checking
    layers     -- conv / batchnorm / linear layers
    attention  -- SE and duality (DTCF) channel attention blocks
    model      -- quarter-channel ResNet34 backbone, ASP pooling, embeddings
    loss       -- additive angular margin softmax head
    audio      -- log-mel filterbank features and feature masking
    synth      -- deterministic synthetic speaker corpus
    train      -- Adam + triangular2 cyclical LR training loop
    metrics    -- cosine scoring, EER, minDCF
    cli        -- command-line entry point
"""

from .attention import DTCFBlock, SEBlock
from .loss import AAMHead
from .model import BackboneConfig, SpeakerModel
from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"
__all__ = ["AAMHead", "BackboneConfig", "DTCFBlock", "SEBlock", "SpeakerModel",
           "Tensor", "grad_check", "no_grad", "__version__"]
