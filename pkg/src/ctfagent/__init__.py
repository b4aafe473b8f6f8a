"""Knowledge-augmented LLM agent orchestration for CTF-style cryptography challenges."""

__version__ = "0.1.0"
