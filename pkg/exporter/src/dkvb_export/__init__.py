"""Export frozen transformer token embeddings to the dkvb record format."""

from .export import ExportError, ExportSpec, export, load_rows, verify
from .recfile import RecordWriter, check_file, hash_sample_id, write_manifest

__version__ = "0.1.0"
