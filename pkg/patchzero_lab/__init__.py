"""
PatchZero lab - detect adversarial patch pixels, zero them out with the dataset mean,
and classify the sanitized image; with masked attacks and a two-stage detector trainer.

Note: heavy modules are imported lazily so submodules stay importable on their own.
"""


def run_command(argv):
    from .cli import run_command as _run_command
    return _run_command(argv)


def train_detector(*args, **kwargs):
    from .workflow import train_detector as _train_detector
    return _train_detector(*args, **kwargs)


__all__ = ["run_command", "train_detector"]
