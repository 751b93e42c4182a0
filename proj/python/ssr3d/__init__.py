"""Hyperspectral super-resolution with separable 3D convolutions."""

from ._core import (
    Config,
    ConfigError,
    ContractError,
    DimensionError,
    Error,
    FormatError,
    GeometryError,
    MetricError,
    Model,
    NonFiniteError,
    __version__,
    bicubic_resize,
    build,
    compare_block_kinds,
    count_params,
    degrade,
    gradcheck,
    load_checkpoint,
    lr_at,
    psnr,
    read_hsc,
    run_cli,
    sam,
    ssim,
    synth,
    write_hsc,
)

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
