from .hook import (
    CaptureCapabilityError,
    CaptureSizeError,
    CaptureSpec,
    export_batch,
    export_capture,
)

__version__ = "0.1.0"

__all__ = [
    "CaptureCapabilityError",
    "CaptureSizeError",
    "CaptureSpec",
    "export_batch",
    "export_capture",
]
