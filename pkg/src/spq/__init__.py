"""spq-kit: variance-retained SVD, activation-based pruning and 8-bit
quantization for transformer weight containers."""
from .container import (ContainerError, TensorContainer, TensorEntry, read_container,
                        tensor_bytes, write_container)
from .config import ConfigError, PipelineConfig
from .pipeline import (CompressionReport, LayerClass, PipelineError, classify_layer,
                       decompress_to_dense, memory_summary, run_pipeline)

__version__ = "0.1.0"
