import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

class LabConfig:
    OUT_DIR = os.getenv("LORACOMP_OUT_DIR", "out")
    THREADS = int(os.getenv("LORACOMP_THREADS", "1"))
    LOG_LEVEL = os.getenv("LORACOMP_LOG_LEVEL", "INFO")
    LOG_FORMAT = os.getenv("LORACOMP_LOG_FORMAT", "json")  # json | plain
    FORMAT_VERSION = 1  # world/params/adapter/config file versions

class DeskDefaults:
    """Desk-scale dimensions where recall is reliably exact and runs take seconds."""
    D = 128
    M = 8192
    NUM_ENTITIES = 30
    NUM_RELATIONS = 4
    DENSITY = 1.0
    RIDGE = 1e-8

class NumericalLimits:
    FEATURE_EPS = 1e-10
    GRAM_CONDITION_CAP = 1e12
    BASIS_RANK_TOL = 1e-12
