"""Single-pass speaker diarization: per-frame embeddings with VAD and OSD
heads, PLDA/VBx clustering and collar-free scoring."""

__version__ = "0.1.0"
