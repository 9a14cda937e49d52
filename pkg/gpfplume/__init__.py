import logging

__version__ = '0.1.0'

logger = logging.getLogger('gpfplume')
logger.setLevel(logging.INFO)
logger.propagate = False
handler = logging.StreamHandler()
formatter = logging.Formatter('%(asctime)s %(name)-12s %(levelname)-8s %('
                              'message)s')
handler.setFormatter(formatter)

if not logger.handlers:
    logger.addHandler(handler)

from . import config, plume, env, tokenizer, gpf, checkpoint, learner, spectral
from .config import PlumeConfig, EnvConfig, GpfConfig, TrainConfig, RunConfig, load_config
from .learner import train, evaluate
