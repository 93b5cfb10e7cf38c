# Utilities package
from .network import NetworkManager
from .validators import Validators
from .audit import AuditLog
from .ring import HashRing
from .cache import NodeCache
from .cost_model import CostModel

__all__ = [
    'NetworkManager',
    'Validators',
    'AuditLog',
    'HashRing',
    'NodeCache',
    'CostModel'
]
