# Metrics package
from .report import RunReport, assemble, compare, quantile

__all__ = [
    'RunReport',
    'assemble',
    'compare',
    'quantile'
]
