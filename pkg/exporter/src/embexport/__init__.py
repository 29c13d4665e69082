"""embexport: encodes datasets into the EMB1 embedding file contract.

Text queries go through a VLM text encoder, database images through
paired VLM/VM image encoders, and query images are produced by a
text-to-image generator backend. Backends are pluggable protocols;
deterministic mock implementations are included.
"""
from .backends import (
    ImageEncoder,
    ImageGenerator,
    MockGenerator,
    MockImageEncoder,
    MockTextEncoder,
    TextEncoder,
)
from .emb1 import write_emb1, write_label_names
from .errors import BackendUnavailableError, ExportError, JobValidationError
from .jobs import (
    ExportJob,
    export_image_embeddings,
    export_text_queries,
    filter_overlapping_classes,
    generate_query_images,
    read_class_list,
    render_prompt,
    validate_prompt_template,
)

__all__ = [
    "BackendUnavailableError",
    "ExportError",
    "ExportJob",
    "ImageEncoder",
    "ImageGenerator",
    "JobValidationError",
    "MockGenerator",
    "MockImageEncoder",
    "MockTextEncoder",
    "TextEncoder",
    "export_image_embeddings",
    "export_text_queries",
    "filter_overlapping_classes",
    "generate_query_images",
    "read_class_list",
    "render_prompt",
    "validate_prompt_template",
    "write_emb1",
    "write_label_names",
]
