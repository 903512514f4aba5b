"""AFC Lab - class-incremental learning with importance-weighted feature consolidation"""
__version__ = "1.0.0"
