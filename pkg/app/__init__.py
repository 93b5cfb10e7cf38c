from flask import Flask

from config import config
from app.log import setup_logging


def create_app(config_name='default', gateway=None):
    """Application factory pattern

    ``config_name`` is a key of ``config.config`` or a config class; ``gateway``
    is the running live gateway whose state the admin endpoints expose.
    """
    app = Flask(__name__)
    cfg = config[config_name] if isinstance(config_name, str) else config_name
    app.config.from_object(cfg)
    app.extensions['cacheroute.gateway'] = gateway

    setup_logging(cfg)

    # Register blueprints
    from app.admin import admin_bp

    app.register_blueprint(admin_bp, url_prefix='/admin')

    return app
