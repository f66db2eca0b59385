"""Static FLOPs and storage accounting.

Convention: 2 FLOPs per multiply-accumulate; pooling, activations,
normalization, and other elementwise work count 1 FLOP per element. The
per-window inference cost decomposes as b + K*m: one shared encoder pass
(the query embedding is computed once) plus one head pass per appliance,
including interaction-feature construction.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import MAGIC, ModelBundle, NetConfig, encoder_length_schedule


def count_encoder_flops(cfg: NetConfig) -> int:
    """One encoder forward pass over a single window."""
    lengths = encoder_length_schedule(cfg.window)
    total = 0
    cin = 1
    for i, cout in enumerate(cfg.channels, start=1):
        conv_len = lengths[2 * i - 1]
        pool_len = lengths[2 * i]
        total += conv_len * cout * (2 * 3 * cin + 1)  # MACs + bias
        total += conv_len * cout                      # ReLU
        total += pool_len * cout                      # pool comparisons
        cin = cout
    flat = lengths[-1] * cfg.channels[-1]
    total += 2 * flat * cfg.embed_dim + cfg.embed_dim  # projection
    total += 3 * cfg.embed_dim + 1                     # L2 normalization
    return total


def count_head_flops(cfg: NetConfig) -> int:
    """One head pass for one appliance, including feature fusion and gating."""
    e, h = cfg.embed_dim, cfg.hidden
    total = 3 * e                          # diff, square, product
    total += 2 * (4 * e) * h + h + h       # fc1 + bias + ReLU
    total += 2 * h * h + h + h             # fc2 + bias + ReLU
    total += 2 * h + 1 + 1                 # state branch + sigmoid
    total += 2 * h + 1 + 1                 # magnitude branch + ReLU
    total += 2                             # gating multiply-add
    return total


def count_flops(model) -> tuple[float, float]:
    """(shared, per-appliance) MFLOPs per mains window."""
    cfg = model.config if isinstance(model, ModelBundle) else model
    return count_encoder_flops(cfg) / 1e6, count_head_flops(cfg) / 1e6


@dataclass
class CostReport:
    shared_mflops: float
    per_appliance_mflops: float
    encoder_params: int
    head_params: int
    total_params: int
    param_bytes: int
    param_meta_bytes: int
    fixed_bytes: int
    store_bytes: int
    embedding_count: int
    per_appliance_delta_bytes: int
    file_bytes: int

    def total_mflops(self, k: int) -> float:
        return self.shared_mflops + k * self.per_appliance_mflops


def _embedding_entry_bytes(name: str, dim: int) -> int:
    return 2 + len(name.encode()) + 4 + 4 * dim


def storage_accounting(bundle: ModelBundle,
                       next_appliance_name: str = "appliance") -> CostReport:
    """Break a bundle's serialized size into payload and bookkeeping bytes.

    The sum of all byte fields equals the size of the saved file exactly.
    ``per_appliance_delta_bytes`` is the file growth from adapting one more
    appliance under the given name.
    """
    cfg = bundle.config
    merged = bundle.params()
    enc_params = bundle.encoder.params.num_values()
    head_params = bundle.head.params.num_values()
    param_bytes = 4 * merged.num_values()
    param_meta = sum(2 + len(n.encode()) + 1 + 4 * merged[n].ndim
                     for n in merged.names())
    fixed = (len(MAGIC) + 4                      # magic + version
             + 8 + 4 * len(cfg.channels) + 8     # architecture description
             + 3 * 16                            # normalizers
             + 4 + 4                             # param and embedding counts
             + 4)                                # CRC trailer
    store_bytes = sum(_embedding_entry_bytes(n, len(v))
                      for n, v in bundle.embeddings.items())
    delta = _embedding_entry_bytes(next_appliance_name, cfg.embed_dim)
    b, m = count_flops(cfg)
    file_bytes = fixed + param_meta + param_bytes + store_bytes
    return CostReport(
        shared_mflops=b,
        per_appliance_mflops=m,
        encoder_params=enc_params,
        head_params=head_params,
        total_params=enc_params + head_params,
        param_bytes=param_bytes,
        param_meta_bytes=param_meta,
        fixed_bytes=fixed,
        store_bytes=store_bytes,
        embedding_count=len(bundle.embeddings),
        per_appliance_delta_bytes=delta,
        file_bytes=file_bytes,
    )


def scaling_report(b: float, m: float, ks) -> list[tuple[int, float]]:
    """Total MFLOPs per window for each appliance count K (exact, linear)."""
    rows = []
    for k in ks:
        if k < 0:
            raise ValueError(f"appliance count must be >= 0, got {k}")
        rows.append((int(k), b + k * m))
    return rows


def render_cost_report(report: CostReport, ks=(0, 1, 2, 5, 10)) -> str:
    lines = [
        f"parameters          {report.total_params:,} "
        f"(encoder {report.encoder_params:,}, head {report.head_params:,})",
        f"network payload     {report.param_bytes:,} bytes "
        f"({report.param_bytes / 1e6:.2f} MB)",
        f"serialized file     {report.file_bytes:,} bytes",
        f"embeddings stored   {report.embedding_count} "
        f"({report.store_bytes:,} bytes)",
        f"storage / appliance {report.per_appliance_delta_bytes:,} bytes "
        f"({report.per_appliance_delta_bytes / 1024:.2f} KB)",
        "",
        f"inference scaling   {report.shared_mflops:.3f} + K * "
        f"{report.per_appliance_mflops:.3f} MFLOPs/window",
    ]
    width = max(len(str(max(ks))), 2)
    for k, total in scaling_report(report.shared_mflops,
                                   report.per_appliance_mflops, ks):
        lines.append(f"  K = {k:<{width}d} -> {total:.3f} MFLOPs/window")
    return "\n".join(lines)
