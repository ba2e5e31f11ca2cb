"""Registration-operator algebra, atlas construction, and linear probing of
image-derived features for knee osteoarthritis state and progression tasks."""

__version__ = "0.1.0"
