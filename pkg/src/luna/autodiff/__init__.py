from luna.autodiff.tensor import Tape, Tensor, as_tensor, current_tape

__all__ = ["Tape", "Tensor", "as_tensor", "current_tape"]
