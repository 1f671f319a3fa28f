"""Federated rounds over LoRA adapters, in-process or over TCP."""

from .core import (
    AggregationPolicy,
    Client,
    FedConfig,
    FederationResult,
    InProcessTransport,
    RoundRecord,
    aggregation_weights,
    client_train_round,
    fedavg,
    local_train,
    make_evaluator,
    round_start_adapters,
    run_federation,
    weighted_average,
)
from .protocol import AdapterUpdate, MsgType, decode_update, encode_update, read_checkpoint, write_checkpoint
from .transport import TcpServerTransport, connect_and_participate, participate_all, serve

__all__ = [
    "AdapterUpdate",
    "AggregationPolicy",
    "Client",
    "FedConfig",
    "FederationResult",
    "InProcessTransport",
    "MsgType",
    "RoundRecord",
    "TcpServerTransport",
    "aggregation_weights",
    "client_train_round",
    "connect_and_participate",
    "decode_update",
    "encode_update",
    "fedavg",
    "local_train",
    "make_evaluator",
    "participate_all",
    "read_checkpoint",
    "round_start_adapters",
    "run_federation",
    "serve",
    "weighted_average",
    "write_checkpoint",
]
