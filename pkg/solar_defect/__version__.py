__version__ = "0.1.0"
__checkpoint_format_version__ = 2
