import numpy as np
import pytest

from refquery.costmodel import (
    count_encoder_flops,
    count_flops,
    count_head_flops,
    render_cost_report,
    scaling_report,
    storage_accounting,
)
from refquery.model import ModelBundle, NetConfig, encode, head_forward
from refquery.ndnet import FlopCounter, Tensor
from refquery.windowing import ZNormalizer

FULL = NetConfig()
TINY = NetConfig(window=17, channels=(2, 2, 4, 4, 8), embed_dim=4, hidden=4)


def make_bundle(cfg=FULL, seed=0):
    return ModelBundle.create(cfg, ZNormalizer(0.0, 1.0), ZNormalizer(0.0, 1.0),
                              ZNormalizer(50.0, 100.0), seed=seed)


def test_head_cost_within_published_band():
    m = count_head_flops(FULL) / 1e6
    assert 0.162 <= m <= 0.168
    # dominant matrix terms alone: 2*(512*128) + 2*(128*128)
    assert count_head_flops(FULL) > 2 * 512 * 128 + 2 * 128 * 128


def test_encoder_cost_within_published_band():
    b = count_encoder_flops(FULL) / 1e6
    assert 4.0 <= b <= 4.3


def test_total_is_b_at_k0():
    b, m = count_flops(FULL)
    assert scaling_report(b, m, [0]) == [(0, b)]


def test_scaling_published_coefficients():
    rows = scaling_report(4.145, 0.165, [1, 10])
    assert rows[0][1] == pytest.approx(4.310)
    assert rows[1][1] == pytest.approx(5.795)


def test_scaling_slope_is_m():
    b, m = count_flops(FULL)
    rows = scaling_report(b, m, range(0, 8))
    diffs = np.diff([t for _, t in rows])
    np.testing.assert_allclose(diffs, m, rtol=1e-12)


def test_counter_matches_instrumented_forward_tiny():
    # dual route: static table count vs FLOPs metered on the live forward pass
    bundle = make_bundle(TINY, seed=3)
    rng = np.random.default_rng(0)
    window = rng.normal(size=TINY.window).astype(np.float32)
    e_r = Tensor(rng.normal(size=TINY.embed_dim).astype(np.float32))
    with FlopCounter() as fc:
        e_q = encode(bundle.encoder, window)
    measured_encoder = fc.total
    with FlopCounter() as fc:
        head_forward(bundle.head, e_r, e_q)
    measured_head = fc.total
    assert abs(measured_encoder - count_encoder_flops(TINY)) \
        <= 0.01 * count_encoder_flops(TINY)
    assert abs(measured_head - count_head_flops(TINY)) \
        <= 0.01 * count_head_flops(TINY)


def test_counter_matches_instrumented_forward_full():
    bundle = make_bundle(FULL)
    window = np.zeros(599, dtype=np.float32)
    with FlopCounter() as fc:
        e_q = encode(bundle.encoder, window)
        head_forward(bundle.head, Tensor(np.zeros(128, dtype=np.float32)), e_q)
    static = count_encoder_flops(FULL) + count_head_flops(FULL)
    assert abs(fc.total - static) <= 0.01 * static


def test_storage_accounting_full_config(tmp_path):
    bundle = make_bundle(FULL)
    report = storage_accounting(bundle)
    assert report.total_params == 292_898
    assert report.param_bytes == 1_171_592
    assert 1.10 <= report.param_bytes / 1e6 <= 1.25
    assert report.per_appliance_delta_bytes <= 1024
    assert report.store_bytes == 0  # empty store: no per-appliance bytes yet

    path = tmp_path / "m.rq"
    bundle.save(path)
    assert report.file_bytes == path.stat().st_size
    # accounting equals actual size minus fixed bookkeeping, exactly
    assert report.param_bytes + report.store_bytes == \
        path.stat().st_size - report.fixed_bytes - report.param_meta_bytes


def test_storage_accounting_tracks_embeddings(tmp_path):
    bundle = make_bundle(FULL)
    before = storage_accounting(bundle, next_appliance_name="kettle")
    bundle.add_embedding("kettle", np.zeros(128))
    after = storage_accounting(bundle)
    assert after.store_bytes - before.store_bytes == before.per_appliance_delta_bytes
    path = tmp_path / "m.rq"
    bundle.save(path)
    assert after.file_bytes == path.stat().st_size


def test_scaling_rejects_negative_k():
    with pytest.raises(ValueError):
        scaling_report(1.0, 1.0, [-1])


def test_render_cost_report_mentions_key_figures():
    text = render_cost_report(storage_accounting(make_bundle(FULL)))
    assert "292,898" in text
    assert "0.165" in text
    assert "4.1" in text
