"""Select, Label, Mix: partial domain adaptation on a NumPy autodiff tape."""

__version__ = "0.1.0"
