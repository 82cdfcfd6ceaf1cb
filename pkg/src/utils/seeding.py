from __future__ import annotations

import logging
import os
import random

import numpy as np
import torch


DETERMINISTIC_ENV = "MEDLSDM_DETERMINISTIC"


def deterministic_requested() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "").strip() in {"1", "true", "yes"}


def seed_everything(seed: int) -> torch.Generator:
    """Seed python/numpy/torch and return a CPU generator for explicit draws."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic_requested():
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        logging.info("%s=1: deterministic kernels, single intra-op thread", DETERMINISTIC_ENV)
    gen = torch.Generator(device="cpu")
    gen.manual_seed(seed)
    return gen


def pick_device() -> torch.device:
    if torch.cuda.is_available() and not deterministic_requested():
        return torch.device("cuda")
    return torch.device("cpu")
