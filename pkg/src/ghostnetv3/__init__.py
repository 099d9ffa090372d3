"""GhostNetV3-style compact CNNs with re-parameterization, distillation and a desk-scale training stack."""

__version__ = "0.1.0"
