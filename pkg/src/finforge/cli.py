"""Command-line surface tying the modules into reproducible pipelines.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Stdout carries data (tables, results); stderr carries diagnostics.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as C
from . import evalharness as E
from . import model as M
from . import scaling as S
from . import tokenizer as T
from . import trainer as R
from .vocabselect import round_up_pow2, sweep

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# Corpus ingestion


def read_documents(path: str) -> list[bytes]:
    """A corpus is a .jsonl file (records with a ``text`` field), a .txt
    file (one document), or a directory of such files."""
    if os.path.isdir(path):
        docs = []
        for name in sorted(os.listdir(path)):
            full = os.path.join(path, name)
            if os.path.isfile(full) and name.endswith((".txt", ".jsonl")):
                docs.extend(read_documents(full))
        if not docs:
            raise ValueError(f"no .txt or .jsonl documents under {path}")
        return docs
    if path.endswith(".jsonl"):
        docs = []
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if not rec.get("text"):
                    raise ValueError(f"{path}:{lineno}: record without text")
                docs.append(rec["text"].encode("utf-8"))
        return docs
    with open(path, "rb") as f:
        return [f.read()]


def partition_corpus(path: str, domains: int, chunks: int) -> list[list[bytes]]:
    """K x C byte chunks. Subdirectories are domains when present; otherwise
    documents are split evenly into K groups. Each domain's bytes are cut
    into C contiguous chunks of near-equal size."""
    subdirs = (
        sorted(
            d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d))
        )
        if os.path.isdir(path)
        else []
    )
    if subdirs:
        groups = [b"".join(read_documents(os.path.join(path, d))) for d in subdirs]
        if len(groups) != domains:
            raise ValueError(
                f"{path} has {len(groups)} domain subdirectories, expected {domains}"
            )
    else:
        docs = read_documents(path)
        parts = np.array_split(np.arange(len(docs)), domains)
        groups = [b"".join(docs[i] for i in idx) for idx in parts]
    out = []
    for blob in groups:
        if len(blob) < chunks:
            raise ValueError("domain too small for the requested chunk count")
        bounds = np.linspace(0, len(blob), chunks + 1, dtype=int)
        out.append([blob[bounds[i] : bounds[i + 1]] for i in range(chunks)])
    return out


def _load_model(path: str) -> tuple[M.LanguageModel, R.TrainConfig]:
    shape, cfg, params, _ = R.load_checkpoint(path)
    return (
        M.LanguageModel(shape, params, eps=cfg.ln_eps, qk_layer_scaling=cfg.qk_layer_scaling),
        cfg,
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train_tokenizer(args) -> int:
    domains = partition_corpus(args.corpus, args.domains, args.chunks)
    model = T.train_parallel(domains, args.chunk_vocab, args.target_vocab)
    T.save_tokenizer(model, args.out)
    holdout = domains[0][0][: 64 * 1024]
    n_tok = len(T.encode(model, holdout))
    bpt = len(holdout) / n_tok if n_tok else float("nan")
    print(f"vocab_size,{model.vocab_size}")
    print(f"holdout_bytes_per_token,{bpt:.4f}")
    print(f"out,{args.out}")
    return 0


def cmd_sweep_vocab(args) -> int:
    docs = read_documents(args.corpus)
    blob = b"".join(docs)
    base = T.train_chunk_unigram(blob, args.base_vocab)
    candidates = sorted(int(c) for c in args.candidates.split(","))
    swept = sweep(base, docs, candidates)
    total_bytes = sum(len(d) for d in docs)
    print("size,tokens,bits,bits_per_byte")
    for c in swept:
        print(f"{c.size},{c.encoded_tokens},{c.encoded_bits:.6f},{c.encoded_bits / total_bytes:.6f}")
    best = min(swept, key=lambda c: (c.encoded_bits, c.size))
    print(f"chosen_raw,{best.size}")
    print(f"chosen_rounded,{round_up_pow2(best.size)}")
    return 0


def cmd_plan(args) -> int:
    if args.params_only is not None:
        target = args.params_only
    else:
        budget = S.ComputeBudget(args.gpu_hours, args.tflops * 1e12, args.discount)
        flops = S.effective_flops(budget)
        print(f"effective_flops,{flops:.6e}")
        for fit in (S.APPROACH_1, S.APPROACH_2):
            p, t = S.chinchilla_predict(flops, fit)
            print(f"approach{fit.approach}_params,{p:.6e}")
            print(f"approach{fit.approach}_tokens,{t:.6e}")
        p1, _ = S.chinchilla_predict(flops, S.APPROACH_1)
        p2, _ = S.chinchilla_predict(flops, S.APPROACH_2)
        target = 0.5 * (p1 + p2)
    shape = S.propose_shape(target, args.vocab) if args.shape is None else _parse_shape(args.shape, args.vocab)
    print(
        f"shape,layers={shape.layers},heads={shape.heads},hidden={shape.hidden},"
        f"head_dim={shape.head_dim},ffn={shape.ffn_hidden},vocab={shape.vocab}"
    )
    table = S.count_parameters(shape)
    width = max(len(r.name) for r in table.rows)
    for r in table.rows:
        print(f"{r.name},{r.per_instance},{r.instances},{r.total}", file=sys.stdout)
        print(f"  {r.name:<{width}} {r.per_instance:>15,} x {r.instances:>5} = {r.total:>18,}", file=sys.stderr)
    print(f"grand_total,{table.grand_total}")
    return 0


def _parse_shape(spec: str, vocab: int) -> S.ModelShape:
    layers, heads, head_dim = (int(x) for x in spec.split(","))
    return S.ModelShape(layers, heads, heads * head_dim, head_dim, 4 * heads * head_dim, vocab)


def cmd_train(args) -> int:
    values = C.parse_config(args.config)
    tok = T.load_tokenizer(values["tokenizer"])
    cfg = C.train_config_from(values)
    hidden = values["heads"] * values["head_dim"]
    shape = S.ModelShape(
        values["layers"], values["heads"], hidden, values["head_dim"], 4 * hidden,
        tok.vocab_size,
    )
    docs_raw = read_documents(values["corpus"])
    docs = [T.encode(tok, d) for d in docs_raw]
    docs = R.shuffle_stream(docs, R.derive_seed(cfg.seed, "doc-shuffle"))
    val_docs = None
    if values["val_corpus"]:
        val_docs = [T.encode(tok, d) for d in read_documents(values["val_corpus"])][
            : values["val_max_chunks"]
        ]

    diag = None
    if args.resume:
        diag = R.DiagnosticsLog(os.path.join(values["out_dir"], "diagnostics.csv"))
        overrides = {}
        for ov in args.override or []:
            key, raw = ov.split("=", 1)
            if key not in C.TRAIN_KEYS:
                raise _UsageError(f"unknown override key {key!r}")
            overrides[key] = C._coerce(key, raw, C.TRAIN_KEYS[key])
        shape, cfg, params, state = R.resume_with_overrides(
            args.resume, overrides, reshuffle_remaining=args.reshuffle, diag=diag
        )
    else:
        params = M.init_params(shape, values["init_seed"])
        state = None

    for line in C.resolved_lines(values, cfg):
        print(line, file=sys.stderr)
    state, last = R.train(
        params, shape, docs, cfg, values["steps"], values["out_dir"],
        eot_id=tok.eot_id, val_docs=val_docs, state=state,
    )
    print(f"final_checkpoint,{last}")
    print(f"final_step,{state.step}")
    return 0


def cmd_eval(args) -> int:
    lm, _ = _load_model(args.model)
    tok = T.load_tokenizer(args.tokenizer)
    if args.eval_cmd == "bpb":
        docs = read_documents(args.docs)
        bpb = E.bits_per_byte(lm, docs, tok, window=args.window, stride=args.stride)
        print(f"bits_per_byte,{bpb:.10f}")
        return 0
    if args.eval_cmd == "generate":
        prompt = [tok.eot_id] + T.encode(tok, args.prompt.encode("utf-8"))
        out = E.greedy_decode(lm, prompt, args.max_new_tokens, eot_id=tok.eot_id)
        sys.stdout.buffer.write(T.decode(tok, out) + b"\n")
        return 0
    # classify
    records = E.load_tasks(args.tasks)
    methods = E.METHODS if args.method == "all" else (args.method,)
    failures = 0
    print("example_id,method,chosen,correct")
    for i, rec in enumerate(records):
        try:
            pool = [
                (s["context"].encode(), s["gold"].encode())
                for s in rec.get("shots_pool", [])
            ]
            context = rec["context"].encode()
            if args.shots:
                context = E.assemble_prompt(context, pool, args.shots, args.seed, i)
            task = E.ClassificationTask(
                context=context,
                candidates=tuple(c.encode() for c in rec["candidates"]),
                gold=rec.get("gold", "").encode() or None,
            )
            for method in methods:
                chosen = E.classify(lm, tok, task, method)
                correct = "" if task.gold is None else int(chosen == task.gold)
                print(f"{i},{method},{chosen.decode('utf-8', 'replace')},{correct}")
        except (ValueError, KeyError) as exc:
            failures += 1
            print(f"example {i}: {exc}", file=sys.stderr)
    return EXIT_DATA if failures else 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="finforge")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train-tokenizer")
    t.add_argument("--corpus", required=True)
    t.add_argument("--domains", type=int, default=1)
    t.add_argument("--chunks", type=int, default=1)
    t.add_argument("--chunk-vocab", type=int, default=65536)
    t.add_argument("--target-vocab", type=int, default=2**17)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train_tokenizer)

    v = sub.add_parser("sweep-vocab")
    v.add_argument("--corpus", required=True)
    v.add_argument("--candidates", required=True, help="comma-separated sizes")
    v.add_argument("--base-vocab", type=int, default=4096)
    v.set_defaults(fn=cmd_sweep_vocab)

    pl = sub.add_parser("plan")
    pl.add_argument("--gpu-hours", type=float, default=1.3e6)
    pl.add_argument("--tflops", type=float, default=102.0)
    pl.add_argument("--discount", type=float, default=0.75)
    pl.add_argument("--vocab", type=int, default=2**17)
    pl.add_argument("--params-only", type=float, default=None)
    pl.add_argument("--shape", default=None, help="layers,heads,head_dim")
    pl.set_defaults(fn=cmd_plan)

    tr = sub.add_parser("train")
    tr.add_argument("--config", required=True)
    tr.add_argument("--resume", default=None)
    tr.add_argument("--override", action="append", default=[])
    tr.add_argument("--reshuffle", action="store_true")
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval")
    evs = ev.add_subparsers(dest="eval_cmd", required=True)
    for name in ("bpb", "classify", "generate"):
        e = evs.add_parser(name)
        e.add_argument("--model", required=True)
        e.add_argument("--tokenizer", required=True)
        if name == "bpb":
            e.add_argument("--docs", required=True)
            e.add_argument("--window", type=int, default=2048)
            e.add_argument("--stride", type=int, default=1024)
        elif name == "classify":
            e.add_argument("--tasks", required=True)
            e.add_argument("--method", default="all", choices=("all",) + E.METHODS)
            e.add_argument("--shots", type=int, default=0)
            e.add_argument("--seed", type=int, default=0)
        else:
            e.add_argument("--prompt", required=True)
            e.add_argument("--max-new-tokens", type=int, default=32)
        e.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (M.NonFiniteError, R.TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, json.JSONDecodeError, T.InsufficientCorpusError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
