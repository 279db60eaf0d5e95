"""notecoder: free-text clinical notes to diagnosis chapters and ICD-9 codes."""

__version__ = "0.1.0"
