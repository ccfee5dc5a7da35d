#!/usr/bin/env python3
"""Regenerates tests/fixtures from the Hugging Face reference implementations.

Writes:
  tiny_gpt2.safetensors        random 2-layer GPT-2 (float32)
  tiny_gpt2_f16.safetensors    the same weights stored as float16
  tiny_gpt2_reference.json     logits, greedy continuations and hooked runs
  tokenizer_cases.json         GPT-2 byte-level BPE encodings of sample strings

Usage: python3 tools/make_reference_fixture.py [--out tests/fixtures]
"""

import argparse
import json
from pathlib import Path

import torch
from safetensors.torch import save_file
from tokenizers import Tokenizer, decoders, models, pre_tokenizers
from transformers import GPT2Config, GPT2LMHeadModel

ROOT = Path(__file__).resolve().parent.parent

SEQUENCES = [
    [1, 2, 3, 4, 5, 6, 7, 8],
    [60, 12, 33, 33, 0, 9],
    [5],
    list(range(10, 42)),  # fills the context window
]
HOOK_LAYER = 1
HOOK_NEURONS = [3, 17, 100]
HOOK_VALUES = [0.5, -1.25, 0.0]
GREEDY_NEW = 6

TOKENIZER_TEXTS = [
    "Paris",
    " Paris",
    "",
    "Paris is the capital of Italy. Paris is the capital of",
    "Hello, world!",
    "  leading spaces and trailing   ",
    "It's we'll they've I'm you'd she'd DON'T",
    "numbers 12345 and 3.14159",
    "tabs\tand\nnewlines\r\n",
    "Ünïcödé café naïve – “quotes” 東京 🙂",
    "a  b   c    d",
    "The Eiffel Tower is located in",
]


def build_model(seed):
    torch.manual_seed(seed)
    cfg = GPT2Config(n_layer=2, n_embd=32, n_head=4, vocab_size=64, n_positions=32,
                     activation_function="gelu_new", bos_token_id=None, eos_token_id=None,
                     resid_pdrop=0.0, embd_pdrop=0.0, attn_pdrop=0.0)
    model = GPT2LMHeadModel(cfg).eval()
    with torch.no_grad():
        # Default init leaves layer norms at identity; perturb everything so the
        # fixture exercises every parameter.
        for name, p in model.named_parameters():
            if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") or name.endswith("ln_f.weight"):
                p.copy_(1.0 + 0.1 * torch.randn_like(p))
            elif name.endswith(".bias"):
                p.copy_(0.05 * torch.randn_like(p))
            else:
                p.copy_(0.3 * torch.randn_like(p))
    return model


def state_for_archive(model, dtype):
    out = {}
    for k, v in model.state_dict().items():
        if k.startswith("lm_head.") or k.endswith(".attn.bias") or k.endswith(".attn.masked_bias"):
            continue
        out[k.removeprefix("transformer.")] = v.detach().to(dtype).contiguous()
    return out


def run(model, ids, hook=None):
    handle = None
    captured = {}
    if hook is not None:
        layer, neurons, values = hook
        act = model.transformer.h[layer].mlp.act

        def replace(_module, _inputs, output):
            captured["act"] = output.detach().clone()
            output = output.clone()
            output[..., neurons] = torch.tensor(values, dtype=output.dtype)
            return output

        handle = act.register_forward_hook(replace)
    try:
        with torch.no_grad():
            logits = model(torch.tensor([ids])).logits[0]
    finally:
        if handle is not None:
            handle.remove()
    return logits, captured.get("act")


def greedy(model, ids, n, hook=None):
    ids = list(ids)
    out = []
    for _ in range(n):
        logits, _ = run(model, ids, hook)
        nxt = int(torch.argmax(logits[-1]).item())  # first maximum = lowest id
        out.append(nxt)
        ids.append(nxt)
    return out


def reference_json(model):
    hook = (HOOK_LAYER, HOOK_NEURONS, HOOK_VALUES)
    cases = []
    for ids in SEQUENCES:
        logits, _ = run(model, ids)
        hooked, act = run(model, ids, hook)
        case = {
            "tokens": ids,
            "logits": logits.tolist(),
            "hooked_logits": hooked.tolist(),
            "activations": act[0].tolist(),
        }
        if len(ids) + GREEDY_NEW <= model.config.n_positions:
            case["greedy"] = greedy(model, ids, GREEDY_NEW)
            case["hooked_greedy"] = greedy(model, ids, GREEDY_NEW, hook)
        cases.append(case)
    return {
        "config": {"n_layers": 2, "d_model": 32, "d_ffn": 128, "n_heads": 4, "vocab_size": 64, "max_positions": 32,
                   "layer_norm_epsilon": model.config.layer_norm_epsilon},
        "hook": {"layer": HOOK_LAYER, "neurons": HOOK_NEURONS, "values": HOOK_VALUES},
        "cases": cases,
    }


def tokenizer_cases():
    bpe = models.BPE.from_file(str(ROOT / "data/gpt2/vocab.json"), str(ROOT / "data/gpt2/merges.txt"))
    tok = Tokenizer(bpe)
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    cases = []
    for text in TOKENIZER_TEXTS:
        ids = tok.encode(text).ids
        assert tok.decode(ids) == text, text
        cases.append({"text": text, "ids": ids})
    return cases


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(ROOT / "tests/fixtures"))
    ap.add_argument("--seed", type=int, default=1234)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = build_model(args.seed)
    meta = {"n_heads": "4", "layer_norm_epsilon": repr(model.config.layer_norm_epsilon)}
    save_file(state_for_archive(model, torch.float32), str(out / "tiny_gpt2.safetensors"), metadata=meta)
    (out / "tiny_gpt2_reference.json").write_text(json.dumps(reference_json(model)))

    # fp16 copy: references come from the same architecture with the rounded weights.
    f16 = state_for_archive(model, torch.float16)
    save_file(f16, str(out / "tiny_gpt2_f16.safetensors"), metadata=meta)
    rounded = build_model(args.seed)
    with torch.no_grad():
        for k, p in rounded.transformer.state_dict().items():
            if k in f16:
                p.copy_(f16[k].float())
    ref16 = reference_json(rounded)
    (out / "tiny_gpt2_f16_reference.json").write_text(json.dumps(ref16))

    (out / "tokenizer_cases.json").write_text(json.dumps(tokenizer_cases(), ensure_ascii=False, indent=1))
    print("fixtures written to", out)


if __name__ == "__main__":
    main()
