import socket
import threading

import numpy as np
import pytest

from fedreview.data import sample_shards, sample_test
from fedreview.errors import ConfigError, ProtocolError, TransportError
from fedreview.federation import (
    AdapterUpdate,
    Client,
    FedConfig,
    MsgType,
    TcpServerTransport,
    connect_and_participate,
    make_evaluator,
    participate_all,
    run_federation,
    serve,
)
from fedreview.federation.transport import parse_address, recv_message, send_message
from fedreview.lora import LoraConfig
from fedreview.metrics import history_rows, rows_to_csv
from fedreview.training import DESK_HYPER

CFG = FedConfig(LoraConfig(("v",), 4), rounds=2, hyper=DESK_HYPER, seed=3, timeout=20.0)


@pytest.fixture(scope="module")
def setting(corpora, vocab):
    shards = sample_shards(corpora.train["T2"], 32, seed=4)
    clients = [Client.from_shard(s, vocab) for s in shards]
    evaluate = make_evaluator({"T2": sample_test(corpora.test["T2"], 8, seed=4)}, vocab, max_new=8)
    return clients, evaluate


class ServerThread(threading.Thread):
    def __init__(self, transport, base, config, evaluate):
        super().__init__(daemon=True)
        self.args = (transport, base, config, evaluate)
        self.result = self.error = None

    def run(self):
        try:
            self.result = serve(*self.args)
        except BaseException as exc:
            self.error = exc


def history_csv(result):
    return rows_to_csv(history_rows(result.histories()["T2"]))


def test_loopback_matches_in_process(base, setting):
    clients, evaluate = setting
    local = run_federation(base, clients, CFG, evaluate)
    transport = TcpServerTransport("127.0.0.1:0", 2, CFG.timeout)
    server = ServerThread(transport, base, CFG, evaluate)
    server.start()
    finals = participate_all(transport.address, clients, base, CFG)
    server.join(30)
    assert server.error is None
    assert history_csv(server.result) == history_csv(local)
    for model in finals:
        assert model.equals(local.models[-1])


def test_single_expected_client(base, setting):
    clients, evaluate = setting
    transport = TcpServerTransport(("127.0.0.1", 0), 1, CFG.timeout)
    server = ServerThread(transport, base, CFG, evaluate)
    server.start()
    connect_and_participate(transport.address, clients[1], base, CFG)
    server.join(30)
    assert server.error is None and server.result.records[-1].round == 2


def raw_register(address, update):
    sock = socket.create_connection(address, timeout=10)
    send_message(sock, update)
    return sock


@pytest.mark.parametrize("bad", [AdapterUpdate(0, 2, 16), AdapterUpdate(0, 1, 16, msg_type=MsgType.AGGREGATE)])
def test_bad_registration_gets_done(base, setting, bad):
    clients, evaluate = setting
    transport = TcpServerTransport("127.0.0.1:0", 1, CFG.timeout)
    server = ServerThread(transport, base, CFG, evaluate)
    server.start()
    with raw_register(transport.address, bad) as sock:
        assert recv_message(sock).msg_type is MsgType.DONE
    connect_and_participate(transport.address, clients[0], base, CFG)
    server.join(30)
    assert server.error is None


def test_duplicate_client_id_rejected(base, setting):
    clients, evaluate = setting
    transport = TcpServerTransport("127.0.0.1:0", 2, CFG.timeout)
    server = ServerThread(transport, base, CFG, evaluate)
    server.start()
    first = threading.Thread(target=connect_and_participate, args=(transport.address, clients[0], base, CFG))
    first.start()
    while not transport.conns:
        threading.Event().wait(0.05)
    with raw_register(transport.address, AdapterUpdate(clients[0].client_id, 1, 1)) as sock:
        assert recv_message(sock).msg_type is MsgType.DONE
    connect_and_participate(transport.address, clients[1], base, CFG)
    first.join(30)
    server.join(30)
    assert server.error is None


def test_rejected_client_raises(base, setting):
    clients, evaluate = setting
    listener = socket.create_server(("127.0.0.1", 0))

    def fake_server():
        conn, _ = listener.accept()
        with conn:
            recv_message(conn)
            send_message(conn, AdapterUpdate(0, 0, 0, msg_type=MsgType.DONE))

    t = threading.Thread(target=fake_server)
    t.start()
    with pytest.raises(ProtocolError, match="ended the session"):
        connect_and_participate(listener.getsockname(), clients[0], base, CFG)
    t.join()
    listener.close()


def test_registration_timeout(base, setting):
    _, evaluate = setting
    transport = TcpServerTransport("127.0.0.1:0", 1, timeout=0.3)
    with pytest.raises(TransportError, match="0 of 1"):
        serve(transport, base, CFG, evaluate)


def test_connect_refused_after_retries(base, setting):
    clients, _ = setting
    probe = socket.create_server(("127.0.0.1", 0))
    address = probe.getsockname()
    probe.close()
    cfg = FedConfig(CFG.lora, rounds=1, timeout=0.5)
    with pytest.raises(TransportError, match="cannot connect"):
        connect_and_participate(address, clients[0], base, cfg)


def test_framing_round_trip():
    a, b = socket.socketpair()
    with a, b:
        msg = AdapterUpdate(3, 4, 5, (("w", np.eye(2)),))
        send_message(a, msg)
        assert recv_message(b).equals(msg)
        a.sendall(b"\x01\x00")
        a.close()
        with pytest.raises(TransportError, match="closed"):
            recv_message(b)


def test_parse_address():
    assert parse_address("127.0.0.1:8080") == ("127.0.0.1", 8080)
    assert parse_address(":9") == ("127.0.0.1", 9)
    with pytest.raises(ConfigError):
        parse_address("localhost")
    with pytest.raises(ConfigError):
        TcpServerTransport("127.0.0.1:0", 0)
