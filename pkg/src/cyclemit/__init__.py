"""Cyclic-consistency mitigation and detection of adversarial attacks on
unrolled multi-coil MRI reconstruction, at desk scale."""

__version__ = "0.1.0"
