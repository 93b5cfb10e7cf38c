import logging
import os
from logging.handlers import RotatingFileHandler

LOG_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'


def setup_logging(cfg, logger_name='app'):
    """
    Configure the package logger once per process
    Console output always; a rotating file outside debug mode
    """
    logger = logging.getLogger(logger_name)
    if getattr(logger, '_cacheroute_configured', False):
        return logger

    level = getattr(logging, str(cfg.LOG_LEVEL).upper(), logging.INFO)
    logger.setLevel(level)

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter('%(levelname)s %(name)s: %(message)s'))
    console.setLevel(level)
    logger.addHandler(console)

    if not cfg.DEBUG:
        if not os.path.exists(cfg.LOG_DIR):
            os.mkdir(cfg.LOG_DIR)
        file_handler = RotatingFileHandler(
            os.path.join(cfg.LOG_DIR, cfg.LOG_FILE), maxBytes=10240000, backupCount=10
        )
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        file_handler.setLevel(logging.INFO)
        logger.addHandler(file_handler)

    logger._cacheroute_configured = True
    logger.info('CacheRoute startup')
    return logger
