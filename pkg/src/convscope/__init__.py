"""Train small convolutional networks and look inside them with a deconvnet and probes."""

__version__ = "0.1.0"
