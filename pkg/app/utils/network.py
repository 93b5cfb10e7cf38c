import errno
import socket

import validators


class NetworkManager:
    """Address parsing and listener checks for live mode"""

    @staticmethod
    def is_valid_host(host):
        """IPv4, IPv6, DNS name, or localhost"""
        if not host:
            return False
        if host == 'localhost':
            return True
        return bool(validators.ipv4(host) or validators.ipv6(host) or validators.domain(host))

    @staticmethod
    def is_valid_port(port, allow_ephemeral=False):
        """Validate a TCP port; 0 asks the OS for an ephemeral port"""
        try:
            port = int(port)
        except (TypeError, ValueError):
            return False
        if allow_ephemeral and port == 0:
            return True
        return 1 <= port <= 65535

    @staticmethod
    def parse_address(address, allow_ephemeral=True):
        """
        Parse 'host:port' (IPv6 as '[::1]:port')
        Returns (host, port) or None when invalid
        """
        if not address or ':' not in address:
            return None
        host, _, port = address.rpartition(':')
        if host.startswith('[') and host.endswith(']'):
            host = host[1:-1]
        if not NetworkManager.is_valid_host(host):
            return None
        if not NetworkManager.is_valid_port(port, allow_ephemeral=allow_ephemeral):
            return None
        return host, int(port)

    @staticmethod
    def format_address(host, port):
        if ':' in host:
            return f'[{host}]:{port}'
        return f'{host}:{port}'

    @staticmethod
    def is_port_free(host, port):
        """True when a listener could bind host:port right now"""
        if int(port) == 0:
            return True
        family = socket.AF_INET6 if ':' in host else socket.AF_INET
        with socket.socket(family, socket.SOCK_STREAM) as sock:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                sock.bind((host, int(port)))
            except OSError as e:
                if e.errno == errno.EADDRINUSE:
                    return False
                raise
        return True

    @staticmethod
    def node_address(node, index, cfg):
        """A node's pinned address, else host:NODE_PORT_BASE+index (base 0 means ephemeral)"""
        if node.address:
            return NetworkManager.parse_address(node.address)
        if cfg.NODE_PORT_BASE == 0:
            return cfg.HOST, 0
        return cfg.HOST, cfg.NODE_PORT_BASE + index
