import struct
import zlib

import numpy as np
import pytest

from conftest import randomize_bn
from oracles import bigint_integer_infer
from quantsr.errors import InvalidGraph, InvalidState, ParseError
from quantsr.graph import (
    OP_ADD,
    OP_CONV,
    OP_INPUT,
    OP_SHUFFLE,
    DeployGraph,
    export_graph,
    import_graph,
    infer_float,
    integer_infer,
    quantize_input,
)
from quantsr.model import StudentConfig, TrainModel, fuse_model
from quantsr.quant import dequantize, insert_qat, quantize, set_phase

SMALL = StudentConfig(num_blocks=2, channels=4, num_conv3_branches=1)


def frozen_qat(seed=0, config=SMALL, size=6):
    rng = np.random.default_rng(seed)
    d = fuse_model(randomize_bn(TrainModel.init(config, seed), rng), warn_stale=False)
    q = insert_qat(d)
    q.calibrate([rng.random((2, 3, size, size), dtype=np.float32) for _ in range(3)])
    set_phase(q, 0, (0, 0))
    return q


@pytest.fixture(scope="module")
def graph():
    return export_graph(frozen_qat())


def test_topology(graph):
    ops = [layer.op for layer in graph.layers]
    assert ops == [OP_INPUT, OP_CONV, OP_CONV, OP_CONV, OP_ADD, OP_CONV, OP_SHUFFLE]
    assert graph.layers[4].shape[:2] == (3, 1)
    assert [layer.relu for layer in graph.layers if layer.op == OP_CONV] == [False, True, True, False]
    assert graph.scale == 3


def test_export_needs_phase_3():
    q = frozen_qat()
    q.phase = 2
    with pytest.raises(InvalidState):
        export_graph(q)


def test_round_trip_byte_exact(graph, tmp_path):
    data = graph.to_bytes()
    assert data[:4] == b"QSR1"
    again = import_graph(data)
    assert again.to_bytes() == data
    graph.save(tmp_path / "m.qsr")
    assert DeployGraph.load(tmp_path / "m.qsr").to_bytes() == data


def test_parse_errors_report_offsets(graph):
    data = graph.to_bytes()
    with pytest.raises(ParseError) as e:
        import_graph(b"XXXX" + data[4:])
    assert e.value.offset == 0
    bumped = data[:4] + struct.pack("<I", 2) + data[8:]
    with pytest.raises(ParseError, match="version") as e:
        import_graph(bumped)
    assert e.value.offset == 4
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    with pytest.raises(ParseError, match="CRC"):
        import_graph(bytes(flipped))
    with pytest.raises(ParseError):
        import_graph(data[: len(data) // 2])
    body = data[:-4] + b"\x00\x00"
    with pytest.raises(ParseError, match="trailing"):
        import_graph(body + struct.pack("<I", zlib.crc32(body)))


def test_validate_rejects_forward_reference(graph):
    bad = import_graph(graph.to_bytes())
    bad.layers[4].shape = (5, 1, 0, 0)
    with pytest.raises(InvalidGraph):
        bad.validate()


def test_integer_engine_matches_bigint_oracle_exactly(graph):
    x = np.random.default_rng(9).random((1, 3, 5, 4), dtype=np.float32)
    codes = quantize_input(graph, x)
    got = integer_infer(graph, codes).astype(np.int64)
    np.testing.assert_array_equal(got, bigint_integer_infer(graph, codes))


def test_integer_engine_within_one_lsb_of_fake_quant(graph):
    q = frozen_qat()
    x = np.random.default_rng(4).random((2, 3, 6, 6), dtype=np.float32)
    with q.no_observe():
        fq = q.forward(x).astype(np.float64)
    out_qp = graph.output_qparams
    ref_codes, _ = quantize(fq, out_qp)
    got = integer_infer(graph, quantize_input(graph, x)).astype(np.int64)
    diff = np.abs(got - ref_codes)
    assert diff.max() <= 1
    assert np.mean(diff == 0) >= 0.999
    y = infer_float(graph, x)
    assert y.shape == (2, 3, 18, 18)
    np.testing.assert_allclose(y, dequantize(got, out_qp), atol=1e-6)


def test_integer_input_shape_checked(graph):
    with pytest.raises(InvalidGraph):
        integer_infer(graph, np.zeros((1, 4, 3, 3), np.uint8))
