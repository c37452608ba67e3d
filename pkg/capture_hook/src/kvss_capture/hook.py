"""Prefill instrumentation: run one forward pass over a prompt and export
post-softmax attention plus cache-resident value states as a capture
directory readable by the kvss toolkit.

Attention is taken from the model's attention-probability output (eager
path) at float32 regardless of compute dtype.  Values are grabbed with a
forward hook on each selected layer's v_proj, i.e. pre-output-projection
and per KV head, which is exactly the state a KV cache retains.  Dense
T x T storage is the format's constraint, so exports are meant for short
prompts (<= ~1k tokens, a few layers).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from kvss.tensor_store import AttentionCapture, save_capture


class CaptureCapabilityError(RuntimeError):
    """The model cannot expose attention probabilities."""


class CaptureSizeError(RuntimeError):
    """The requested export does not fit in memory; includes size guidance."""


@dataclass
class CaptureSpec:
    model: str
    prompt: str | None = None
    token_ids: list[int] | None = None
    layers: tuple[int, ...] = (0,)
    max_t: int = 512
    out: str = "capture"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.prompt is None) == (self.token_ids is None):
            raise ValueError("exactly one of prompt / token_ids required")
        if self.max_t < 1:
            raise ValueError("max_t must be >= 1")
        self.layers = tuple(int(l) for l in self.layers)
        if len(set(self.layers)) != len(self.layers):
            raise ValueError("duplicate layers")


def _decoder_layers(model):
    for path in ("model.layers", "transformer.h", "gpt_neox.layers"):
        obj = model
        try:
            for part in path.split("."):
                obj = getattr(obj, part)
        except AttributeError:
            continue
        return list(obj)
    raise CaptureCapabilityError(
        "cannot locate decoder layers on this architecture")


def _head_geometry(config):
    H = config.num_attention_heads
    H_kv = getattr(config, "num_key_value_heads", None) or H
    d_h = getattr(config, "head_dim", None) or config.hidden_size // H
    return H, H_kv, d_h


def _tokenize(spec: CaptureSpec, tokenizer):
    if spec.token_ids is not None:
        ids = list(spec.token_ids)
    else:
        if tokenizer is None:
            raise ValueError("prompt text given but no tokenizer available")
        ids = tokenizer(spec.prompt, add_special_tokens=True)["input_ids"]
    truncated = len(ids) > spec.max_t
    return ids[: spec.max_t], truncated


def export_capture(spec: CaptureSpec, model=None, tokenizer=None) -> str:
    """Run prefill under the spec and write a capture directory.

    `model`/`tokenizer` may be passed pre-loaded (tests, batch reuse);
    otherwise they are loaded from `spec.model`.  Returns the directory
    path; the directory always passes the kvss validator.
    """
    if model is None:
        from transformers import AutoModelForCausalLM, AutoTokenizer
        model = AutoModelForCausalLM.from_pretrained(
            spec.model, attn_implementation="eager", dtype=torch.float32)
        tokenizer = AutoTokenizer.from_pretrained(spec.model)
    model.eval()

    layers = _decoder_layers(model)
    bad = [l for l in spec.layers if not 0 <= l < len(layers)]
    if bad:
        raise ValueError(f"layer(s) {bad} outside model range [0, {len(layers)})")
    H, H_kv, d_h = _head_geometry(model.config)

    ids, truncated = _tokenize(spec, tokenizer)
    T = len(ids)
    # dense storage: L*H*T*T + L*H_kv*T*d_h floats
    n_bytes = 4 * len(spec.layers) * (H * T * T + H_kv * T * d_h)
    if n_bytes > 8 * 2 ** 30:
        raise CaptureSizeError(
            f"export would be {n_bytes / 2**30:.1f} GiB dense; lower max_t "
            f"(T={T}) or the layer count ({len(spec.layers)})")

    values = {}

    def grab(layer_idx):
        def fn(_mod, _inp, out):
            v = out.detach().to(torch.float32)[0]  # [T, H_kv*d_h]
            values[layer_idx] = v.reshape(T, H_kv, d_h).permute(1, 0, 2)
        return fn

    handles = []
    try:
        for l in spec.layers:
            attn = layers[l].self_attn
            if not hasattr(attn, "v_proj"):
                raise CaptureCapabilityError(
                    f"layer {l} self-attention has no v_proj to hook")
            handles.append(attn.v_proj.register_forward_hook(grab(l)))
        input_ids = torch.tensor([ids], dtype=torch.long)
        with torch.no_grad():
            out = model(input_ids, output_attentions=True, use_cache=False)
    except torch.cuda.OutOfMemoryError as e:  # pragma: no cover - CPU sandbox
        raise CaptureSizeError(
            f"OOM at T={T}, {len(spec.layers)} layers; lower max_t") from e
    finally:
        for h in handles:
            h.remove()

    if (out.attentions is None or len(out.attentions) < len(layers)
            or any(a is None for a in out.attentions)):
        raise CaptureCapabilityError(
            "model returned no attention probabilities; load it with "
            "attn_implementation='eager'")

    attention = np.stack(
        [out.attentions[l][0].detach().to(torch.float32).numpy()
         for l in spec.layers])  # [L, H, T, T]
    # renormalize rows post-cast so the validator's exact tolerance holds;
    # pre-normalization sums are recorded for inspection
    sums = attention.sum(axis=-1)
    worst = float(np.abs(np.where(sums > 0, sums, 1.0) - 1.0).max())
    attention = attention / np.maximum(sums[..., None], 1e-30)
    attention = np.tril(attention).astype(np.float32)

    vals = np.stack([values[l].numpy() for l in spec.layers]).astype(np.float32)
    kv_map = (np.arange(H) // max(1, H // H_kv)).astype(np.int64)

    meta = {
        "source": "kvss-capture",
        "model": spec.model,
        "model_layers": list(spec.layers),
        "truncated": truncated,
        "renormalized": True,
        "max_row_sum_deviation_pre_norm": worst,
        "prompt_tokens": T,
        **spec.meta,
    }
    cap = AttentionCapture(attention=attention, values=vals,
                           kv_map=kv_map, meta=meta)
    save_capture(cap, spec.out)
    return spec.out


def export_batch(specs, model=None, tokenizer=None, index_path=None) -> list[dict]:
    """Export each spec in sequence; failures are recorded, not raised.

    Writes `index.json` (one entry per spec, in order) next to the first
    output directory unless `index_path` is given.  Returns the index.
    """
    index = []
    for spec in specs:
        entry = {"model": spec.model, "out": spec.out}
        try:
            export_capture(spec, model=model, tokenizer=tokenizer)
            entry["status"] = "ok"
        except Exception as e:
            entry["status"] = "failed"
            entry["error"] = f"{type(e).__name__}: {e}"
        index.append(entry)
    if index_path is None and specs:
        index_path = os.path.join(os.path.dirname(os.path.abspath(specs[0].out)),
                                  "index.json")
    if index_path is not None:
        with open(index_path, "w") as f:
            json.dump(index, f, indent=2, sort_keys=True)
            f.write("\n")
    return index
