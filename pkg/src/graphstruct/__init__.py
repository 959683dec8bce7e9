"""Joint learning of discrete graph structure and GCN weights via
truncated hypergradient descent."""

__version__ = "0.1.0"
