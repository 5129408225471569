from .tensor import (
    Tensor,
    add,
    clamp,
    clamp01,
    concat_channels,
    conv3d,
    div,
    log,
    maxpool3d,
    mul,
    narrow_channels,
    relu,
    sigmoid,
    tmean,
    tsum,
    upsample2x,
)
from .network import (
    Network,
    NetworkConfig,
    ParamSet,
    base_network_config,
    build_network,
    forward,
    fusion_network_config,
    load_checkpoint,
    protuberance_network_config,
    save_checkpoint,
)

__all__ = [
    "Tensor", "add", "clamp", "clamp01", "concat_channels", "conv3d", "div", "log",
    "maxpool3d", "mul", "narrow_channels", "relu", "sigmoid", "tmean",
    "tsum", "upsample2x", "Network", "NetworkConfig", "ParamSet",
    "base_network_config", "build_network", "forward",
    "fusion_network_config", "load_checkpoint",
    "protuberance_network_config", "save_checkpoint",
]
