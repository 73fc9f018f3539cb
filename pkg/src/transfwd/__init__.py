"""Discovery and classification of transparent DNS forwarders."""

__version__ = "0.1.0"
