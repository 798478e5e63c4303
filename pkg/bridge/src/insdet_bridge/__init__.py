"""Bridge from real images to the instance-detection engine's file formats."""

from .errors import BridgeError
from .extract import ExtractionJob, ImageEntry, extract, load_job

__version__ = "0.1.0"
