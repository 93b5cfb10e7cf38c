import os
from dotenv import load_dotenv

# Load environment variables
basedir = os.path.abspath(os.path.dirname(__file__))
load_dotenv(os.path.join(basedir, '.env'))

ENV_PREFIX = 'CACHEROUTE_'


def _env(name, default):
    return os.environ.get(ENV_PREFIX + name, default)


class Config:
    """Base configuration"""
    # Live-mode listeners
    HOST = _env('HOST', '127.0.0.1')
    GATEWAY_PORT = int(_env('GATEWAY_PORT', 7100))
    ADMIN_PORT = int(_env('ADMIN_PORT', 7180))
    # Node i of a scenario listens on NODE_PORT_BASE + i unless the scenario pins an address
    NODE_PORT_BASE = int(_env('NODE_PORT_BASE', 7101))

    # Gateway behaviour
    REQUEST_TIMEOUT_MS = int(_env('REQUEST_TIMEOUT_MS', 3000))
    CLIENT_RETRIES = int(_env('CLIENT_RETRIES', 1))
    MAX_FRAME_BYTES = int(_env('MAX_FRAME_BYTES', 1024 * 1024))
    SHUTDOWN_GRACE_S = float(_env('SHUTDOWN_GRACE_S', 5.0))

    # Latency assertions on loopback
    JITTER_BUDGET_MS = float(_env('JITTER_BUDGET_MS', 15.0))

    # Logging
    LOG_LEVEL = _env('LOG_LEVEL', 'INFO')
    LOG_DIR = _env('LOG_DIR', 'logs')
    LOG_FILE = 'cacheroute.log'

    DEBUG = False
    TESTING = False


class DevelopmentConfig(Config):
    """Development configuration"""
    DEBUG = True


class ProductionConfig(Config):
    """Production configuration"""
    DEBUG = False


class TestingConfig(Config):
    """Test configuration: ephemeral ports, short timeouts"""
    DEBUG = True
    TESTING = True
    HOST = '127.0.0.1'
    GATEWAY_PORT = 0
    ADMIN_PORT = 0
    NODE_PORT_BASE = 0
    REQUEST_TIMEOUT_MS = 1000
    SHUTDOWN_GRACE_S = 1.0


config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': DevelopmentConfig
}


def get_config(name=None):
    """Resolve a config class by name, falling back to CACHEROUTE_ENV"""
    name = name or _env('ENV', 'default')
    return config.get(name, config['default'])
