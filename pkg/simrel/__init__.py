"""simrel - Compositional finite abstractions with (epsilon, delta) simulation relations."""

__version__ = "1.0.0"
