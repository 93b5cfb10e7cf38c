import re

from app.models import ROUTING_POLICIES
from app.utils.network import NetworkManager


class Validators:
    """Field validators for scenario files; each returns (ok, message)"""

    @staticmethod
    def validate_node_id(node_id):
        """
        Validate node id format
        Alphanumeric, dot, underscore, hyphen, 1-64 characters
        """
        if not isinstance(node_id, str) or not node_id or len(node_id) > 64:
            return False, "Node id must be 1-64 characters"

        if not re.match(r'^[a-zA-Z0-9._-]+$', node_id):
            return False, "Node id can only contain letters, numbers, dots, underscores, and hyphens"

        return True, ""

    @staticmethod
    def validate_address(address):
        """Validate host:port"""
        if address is None:
            return True, ""  # Address is optional outside live mode

        if not isinstance(address, str) or NetworkManager.parse_address(address) is None:
            return False, "Invalid address (expected host:port, e.g. 127.0.0.1:7101)"

        return True, ""

    @staticmethod
    def validate_positive_int(value, name, minimum=1):
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            return False, f"{name} must be an integer >= {minimum}"
        return True, ""

    @staticmethod
    def validate_non_negative(value, name):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
            return False, f"{name} must be a number >= 0"
        return True, ""

    @staticmethod
    def validate_seed(seed):
        """Unsigned 64-bit seed"""
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            return False, "seed must be an integer in [0, 2^64)"
        return True, ""

    @staticmethod
    def validate_routing_policy(policy):
        if policy not in ROUTING_POLICIES:
            return False, f"routing_policy must be one of: {', '.join(ROUTING_POLICIES)}"
        return True, ""

    @staticmethod
    def validate_fault_mode(mode):
        valid_modes = ['down', 'slow']
        if mode not in valid_modes:
            return False, f"Fault mode must be one of: {', '.join(valid_modes)}"
        return True, ""
