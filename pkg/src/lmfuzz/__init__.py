"""Language-model-guided differential fuzzing of a small RISC-V core model."""

__version__ = "0.1.0"
