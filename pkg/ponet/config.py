# ponet/config.py
from __future__ import annotations

import os
from functools import lru_cache
from typing import Literal

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict


load_dotenv()

Precision = Literal["f32", "f64"]


class Settings(BaseModel):
    model_config = ConfigDict(frozen=True)

    app_env: str = "dev"
    log_level: str = "INFO"
    mem_budget_bytes: int = 2 * 1024**3
    default_precision: Precision = "f64"
    results_dir: str = "results"


@lru_cache
def get_settings() -> Settings:
    return Settings(
        app_env=os.getenv("PONET_ENV", "dev"),
        log_level=os.getenv("PONET_LOG_LEVEL", "INFO"),
        mem_budget_bytes=int(os.getenv("PONET_MEM_BUDGET_BYTES", str(2 * 1024**3))),
        default_precision=os.getenv("PONET_PRECISION", "f64"),
        results_dir=os.getenv("PONET_RESULTS_DIR", "results"),
    )


def dtype_for(precision: Precision) -> np.dtype:
    return np.dtype(np.float32) if precision == "f32" else np.dtype(np.float64)
