"""Command-line entry point: ``tomsense <command> ...``.

Every run writes into a fresh output directory (``--out-dir``, or the next
free ``<command>-NNN`` under $TOMSENSE_OUT_DIR / ./runs) together with a
``run.json`` reproducibility stanza. Failures leave an ``error.json`` and exit
nonzero.
"""

import argparse
import hashlib
import json
import os
import platform
import sys
import traceback

from . import __version__

ENV_OUT_DIR = "TOMSENSE_OUT_DIR"
ENV_THREADS = "TOMSENSE_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class CliError(Exception):
    pass


# shared helpers


def _sha(path):
    from .container import file_sha256

    return file_sha256(path)


def _vocab(args):
    from .data import Vocab

    return Vocab.from_file(args.vocab) if getattr(args, "vocab", None) else Vocab.toy()


def _read_text(path):
    with open(path, encoding="utf-8") as f:
        return f.read()


def _tom(path):
    from .data import load_tom_jsonl

    return load_tom_jsonl(path)


def _tom_samples(examples, vocab, limit=None):
    from .model import Sample

    out = [Sample(ids, [tid]) for ex in examples for ids, tid in ex.encoded_prompts(vocab)]
    return out[:limit] if limit else out


def _corpus_samples(text, vocab, window, limit=None):
    from .data import corpus_windows
    from .model import sequence_to_sample

    wins = corpus_windows(vocab.encode(text), window, vocab.bos_id)
    if not wins:
        raise CliError(f"corpus shorter than one window of {window} tokens")
    out = [sequence_to_sample(w) for w in wins]
    return out[:limit] if limit else out


def _trace_inputs(args, vocab, ckpt):
    """Prompt batch used by the analyses: first --n-prompts ToM prompts."""
    examples = _tom(args.tom)
    seqs = [ids for ex in examples for ids, _ in ex.encoded_prompts(vocab)][: args.n_prompts]
    if not seqs:
        raise CliError("no prompts in ToM file")
    return seqs


class Run:
    def __init__(self, args):
        self.args = args
        self.inputs = {}
        self.outputs = {}
        self.summary = {}
        self.dir = _fresh_dir(args)

    def input(self, path):
        if path is None:
            return None
        if not os.path.exists(path):
            raise CliError(f"input not found: {path}")
        self.inputs[path] = _sha(path)
        return path

    def path(self, name):
        p = os.path.join(self.dir, name)
        if os.path.exists(p):
            raise CliError(f"refusing to overwrite {p}")
        return p

    def wrote(self, name):
        self.outputs[name] = _sha(os.path.join(self.dir, name))

    def json(self, name, obj):
        from .reports import write_json

        write_json(self.path(name), obj)
        self.wrote(name)

    def csv(self, name, schema, rows):
        from .reports import write_csv

        write_csv(self.path(name), schema, rows)
        self.wrote(name)

    def stanza(self, status, error=None):
        import numpy

        argd = {k: v for k, v in vars(self.args).items() if k != "func"}
        cfg = json.dumps(argd, sort_keys=True, default=str)
        return {
            "command": self.args.command + (f" {self.args.sub}" if getattr(self.args, "sub", None) else ""),
            "argv": sys.argv[1:],
            "args": json.loads(cfg),
            "config_sha256": hashlib.sha256(cfg.encode()).hexdigest(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": argd.get("seed"),
            "version": __version__,
            "python": platform.python_version(),
            "numpy": numpy.__version__,
            "threads": self.args.threads,
            "status": status,
            "error": error,
            "summary": self.summary,
        }


def _fresh_dir(args):
    if args.out_dir:
        if os.path.exists(args.out_dir):
            raise CliError(f"output directory {args.out_dir} already exists")
        os.makedirs(args.out_dir)
        return args.out_dir
    root = os.environ.get(ENV_OUT_DIR, "runs")
    os.makedirs(root, exist_ok=True)
    stem = args.command + (f"-{args.sub}" if getattr(args, "sub", None) else "")
    for i in range(1, 100000):
        d = os.path.join(root, f"{stem}-{i:03d}")
        try:
            os.makedirs(d)
            return d
        except FileExistsError:
            continue
    raise CliError("could not allocate an output directory")


# commands


def cmd_make_data(run, args):
    from .data import generate_corpus, generate_tom_dataset, save_tom_jsonl

    if args.kind == "tom":
        ex = generate_tom_dataset(args.n, args.seed)
        save_tom_jsonl(ex, run.path("tom.jsonl"))
        run.wrote("tom.jsonl")
        run.summary = {"examples": len(ex)}
    else:
        text = generate_corpus(args.n, args.seed)
        with open(run.path("corpus.txt"), "w", encoding="utf-8") as f:
            f.write(text + "\n")
        run.wrote("corpus.txt")
        run.summary = {"sentences": args.n}
    if args.write_vocab:
        _vocab(args).save(run.path("vocab.txt"))
        run.wrote("vocab.txt")


def cmd_train(run, args):
    from .container import save_checkpoint
    from .data import corpus_windows, tom_training_sequences
    from .model import AdamConfig, ModelConfig, train_toy

    vocab = _vocab(args)
    cfgd = {}
    if args.model_config:
        cfgd = json.loads(_read_text(run.input(args.model_config)))
    cfgd.setdefault("vocab_size", len(vocab))
    cfg = ModelConfig.from_dict(cfgd)
    seqs = []
    if args.tom:
        seqs += tom_training_sequences(_tom(run.input(args.tom)), vocab)
    if args.corpus:
        seqs += corpus_windows(vocab.encode(_read_text(run.input(args.corpus))), args.window, vocab.bos_id)
    if not seqs:
        raise CliError("train needs --tom and/or --corpus")
    adam = AdamConfig(lr=args.lr, batch_size=args.batch_size)
    ck = train_toy(cfg, seqs, args.steps, seed=args.seed, adam=adam)
    save_checkpoint(run.path("checkpoint.tsn"), ck)
    run.wrote("checkpoint.tsn")
    run.summary = {"fingerprint": ck.fingerprint(), "final_train_loss": ck.meta.get("final_train_loss"), "n_parameters": ck.n_parameters()}


def cmd_estimate_sensitivity(run, args):
    from .container import load_checkpoint, save_sensitivity
    from .model import ALL_TOKENS, FINAL_TOKEN
    from .sensitivity import estimate_fisher_diag

    ck = load_checkpoint(run.input(args.checkpoint))
    vocab = _vocab(args)
    if bool(args.tom) == bool(args.corpus):
        raise CliError("give exactly one of --tom or --corpus")
    if args.tom:
        samples = _tom_samples(_tom(run.input(args.tom)), vocab, args.n)
        mode = args.loss_mode or FINAL_TOKEN
    else:
        samples = _corpus_samples(_read_text(run.input(args.corpus)), vocab, args.window, args.n)
        mode = args.loss_mode or ALL_TOKENS
    sens = estimate_fisher_diag(ck, samples, mode, chunk_size=args.chunk_size)
    save_sensitivity(run.path("sensitivity.tsn"), sens)
    run.wrote("sensitivity.tsn")
    run.summary = sens.meta()


def cmd_build_mask(run, args):
    from .container import load_sensitivity, save_mask
    from .masking import GENERAL, build_random_mask, build_topk_mask, combine_masks

    task = load_sensitivity(run.input(args.sensitivity))
    if args.random_seed is not None:
        mask = build_random_mask(task.shapes(), args.kappa, seed=args.random_seed)
    elif args.general:
        general = load_sensitivity(run.input(args.general))
        gk = args.kappa if args.general_kappa is None else args.general_kappa
        mask = combine_masks(build_topk_mask(task, args.kappa), build_topk_mask(general, gk, GENERAL), force=args.force)
    else:
        mask = build_topk_mask(task, args.kappa)
    save_mask(run.path("mask.tsn"), mask)
    run.wrote("mask.tsn")
    run.json("mask_summary.json", mask.summary())
    run.summary = {"total": mask.total(), "provenance": mask.provenance, "fingerprint": mask.fingerprint()}


def cmd_perturb(run, args):
    from .container import load_checkpoint, load_mask, load_record, save_checkpoint, save_record
    from .perturbation import apply_mean_perturbation, revert

    ck = load_checkpoint(run.input(args.checkpoint))
    if args.revert:
        out = revert(ck, load_record(run.input(args.revert)))
        save_checkpoint(run.path("checkpoint.tsn"), out)
        run.wrote("checkpoint.tsn")
        run.summary = {"fingerprint": out.fingerprint()}
        return
    if not args.mask:
        raise CliError("perturb needs --mask (or --revert RECORD)")
    pert, rec = apply_mean_perturbation(ck, load_mask(run.input(args.mask)))
    save_checkpoint(run.path("checkpoint.tsn"), pert)
    save_record(run.path("record.tsn"), rec)
    run.wrote("checkpoint.tsn")
    run.wrote("record.tsn")
    run.summary = rec.meta()


def cmd_analyze(run, args):
    from . import analysis, reports
    from .container import load_checkpoint, load_mask
    from .masking import mask_rank_report
    from .model import forward_batch

    vocab = _vocab(args)
    sub = args.sub
    if sub == "mask-rank":
        mask = load_mask(run.input(args.mask))
        weights = load_checkpoint(run.input(args.checkpoint)).params if args.checkpoint else None
        rep = mask_rank_report(mask, weights)
        run.json("mask_rank.json", rep)
        run.csv("mask_rank.csv", "mask_rank", reports.mask_rank_rows(rep))
        return
    ck = load_checkpoint(run.input(args.checkpoint))
    if sub == "diag-dominance":
        from .sensitivity import diag_dominance_report, sample_coords, sample_fisher_block

        if args.tom:
            samples, mode = _tom_samples(_tom(run.input(args.tom)), vocab, args.n), "final-token"
        else:
            samples, mode = _corpus_samples(_read_text(run.input(args.corpus)), vocab, args.window, args.n), "all-tokens"
        coords = sample_coords(ck, args.per_matrix, args.seed)
        rows = []
        for name, cs in coords.items():
            rep = diag_dominance_report(sample_fisher_block(ck, samples, cs, mode))
            rows.append(dict(matrix=name, **rep))
        run.json("diag_dominance.json", rows)
        run.csv("diag_dominance.csv", "diag_dominance", rows)
        run.summary = {"min_ratio": min(r["ratio"] for r in rows)}
        return
    seqs = _trace_inputs(args, vocab, ck)
    base = forward_batch(ck, seqs)
    if sub == "spectrum":
        mask = load_mask(run.input(args.mask))
        rows = analysis.spectrum_report(base, mask, ck.config, args.post_rotation)
        summ = analysis.alignment_summary(rows, args.max_distance)
        run.json("spectrum.json", {"rows": rows, "alignment": summ})
        run.csv("spectrum.csv", "spectrum", reports.spectrum_rows(rows))
        run.summary = summ
        return
    pert = load_checkpoint(run.input(args.perturbed))
    after = forward_batch(pert, seqs)
    if sub == "sinks":
        rep = analysis.sink_shift(base.attn, after.attn, args.threshold, base.lengths)
        run.json("sinks.json", rep.to_dict())
        run.csv("sinks.csv", "sinks", reports.sink_rows(rep))
        run.summary = {"ratio": rep.ratio}
    elif sub == "geometry":
        sel = None
        if args.selection == "shifted":
            sel = [(l, b, h, t) for l, b, h, t in analysis.sink_shift(base.attn, after.attn, args.threshold, base.lengths).shifted]
            if not sel:
                raise CliError("no shifted rows to select; use --selection all")
        rep = analysis.geometry_report(base, base, after, sel)
        run.json("geometry.json", rep.to_dict())
        run.csv("geometry.csv", "geometry", reports.geometry_rows(rep))
        run.summary = {"n_selected": rep.n_selected}
    elif sub == "delta-attn":
        freqs = [int(x) for x in args.freqs.split(",")] if args.freqs else None
        dec = analysis.head_delta_attention(base, after, args.layer, args.head, args.batch, freqs, freqs, ck.config.rope)
        s = dec.summary()
        run.json("delta_attn.json", {"summary": s, "delta": dec.delta, "term1": dec.term1, "term2": dec.term2, "term3": dec.term3})
        run.csv("delta_attn.csv", "delta_attn", [s])
        run.summary = s


def cmd_eval(run, args):
    from . import reports
    from .container import load_checkpoint
    from .evaluation import localization_eval, parse_grid, perplexity, tom_eval

    ck = load_checkpoint(run.input(args.checkpoint))
    vocab = _vocab(args)
    if args.sub == "ppl":
        ppl = perplexity(ck, vocab.encode(_read_text(run.input(args.corpus))), args.window, vocab.bos_id)
        run.json("ppl.json", {"perplexity": ppl, "window": args.window})
        run.summary = {"perplexity": ppl}
    elif args.sub == "localization":
        lengths = [int(x) for x in parse_grid(args.lengths)] if args.lengths else None
        kw = {"lengths": lengths} if lengths else {}
        res = localization_eval(ck, vocab.encode(_read_text(run.input(args.corpus))), vocab, n_per_length=args.n, seed=args.seed, **kw)
        run.json("localization.json", res)
        run.csv("localization.csv", "localization", reports.localization_rows(res["curve"]))
        run.summary = res["curve"]
    else:
        res = tom_eval(ck, _tom(run.input(args.tom)), vocab)
        run.json("tom.json", res)
        run.csv("tom.csv", "tom", reports.tom_rows(res))
        run.summary = {"mean": res["mean"], "overall": res["overall"]}


def cmd_sweep(run, args):
    from . import reports
    from .container import load_checkpoint, load_sensitivity
    from .evaluation import EvalConfig, kappa_sweep, parse_grid

    vocab = _vocab(args)
    ck = load_checkpoint(run.input(args.checkpoint))
    st = load_sensitivity(run.input(args.task_sensitivity))
    sg = load_sensitivity(run.input(args.general_sensitivity))
    loc = vocab.encode(_read_text(run.input(args.localization_corpus))) if args.localization_corpus else None
    cfg = EvalConfig(
        _tom(run.input(args.tom)),
        vocab,
        vocab.encode(_read_text(run.input(args.corpus))),
        args.window,
        localization_corpus=loc,
        localization_n=args.localization_n,
        seed=args.seed,
    )
    grid = parse_grid(args.grid)
    res = kappa_sweep(ck, st, sg, grid, cfg, force=args.force)
    run.json("sweep.json", res.to_dict())
    run.csv("sweep.csv", "sweep", reports.sweep_rows(res))
    run.summary = {"grid_points": len(grid), "selected_kappa": res.selected_kappa}


def cmd_report(run, args):
    """Collect the run.json stanzas of earlier runs into one index."""
    rows, stanzas = [], []
    for d in args.runs:
        p = os.path.join(d, "run.json")
        run.input(p)
        with open(p, encoding="utf-8") as f:
            st = json.load(f)
        stanzas.append(st)
        rows.append({"run": d, "command": st["command"], "status": st["status"], "config_sha256": st["config_sha256"], "outputs": ";".join(sorted(st["outputs"]))})
    run.json("report.json", {"runs": stanzas})
    import csv

    with open(run.path("report.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["run", "command", "status", "config_sha256", "outputs"])
        w.writeheader()
        w.writerows(rows)
    run.wrote("report.csv")
    run.summary = {"runs": len(rows)}


# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", help="fresh output directory (must not exist)")
    common.add_argument("--threads", type=int, default=int(os.environ.get(ENV_THREADS, "1")))
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--vocab", help="vocabulary file, one token per line (default: built-in toy vocabulary)")

    p = argparse.ArgumentParser(prog="tomsense", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sp = p.add_subparsers(dest="command", required=True)

    q = sp.add_parser("make-data", parents=[common], help="generate a synthetic ToM file or narrative corpus")
    q.add_argument("--kind", choices=["tom", "corpus"], required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--write-vocab", action="store_true")
    q.set_defaults(func=cmd_make_data)

    q = sp.add_parser("train", parents=[common], help="train the toy decoder")
    q.add_argument("--model-config")
    q.add_argument("--tom")
    q.add_argument("--corpus")
    q.add_argument("--window", type=int, default=32)
    q.add_argument("--steps", type=int, default=600)
    q.add_argument("--lr", type=float, default=3e-3)
    q.add_argument("--batch-size", type=int, default=32)
    q.set_defaults(func=cmd_train)

    q = sp.add_parser("estimate-sensitivity", parents=[common], help="empirical Fisher diagonal")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--tom")
    q.add_argument("--corpus")
    q.add_argument("--loss-mode", choices=["final-token", "all-tokens"])
    q.add_argument("--n", type=int, help="number of samples (default: all)")
    q.add_argument("--window", type=int, default=64)
    q.add_argument("--chunk-size", type=int, default=16)
    q.set_defaults(func=cmd_estimate_sensitivity)

    q = sp.add_parser("build-mask", parents=[common], help="top-kappa, combined or random mask")
    q.add_argument("--sensitivity", required=True, help="task sensitivity map (shapes source for random masks)")
    q.add_argument("--general")
    q.add_argument("--kappa", type=float, required=True)
    q.add_argument("--general-kappa", type=float)
    q.add_argument("--random-seed", type=int)
    q.add_argument("--force", action="store_true", help="combine maps with unexpected loss modes")
    q.set_defaults(func=cmd_build_mask)

    q = sp.add_parser("perturb", parents=[common], help="mean-value perturbation or revert")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--mask")
    q.add_argument("--revert", metavar="RECORD")
    q.set_defaults(func=cmd_perturb)

    q = sp.add_parser("analyze", help="mechanistic analyses")
    asp = q.add_subparsers(dest="sub", required=True)
    trace = argparse.ArgumentParser(add_help=False)
    trace.add_argument("--checkpoint", required=True)
    trace.add_argument("--tom", required=True, help="ToM file whose prompts form the trace batch")
    trace.add_argument("--n-prompts", type=int, default=64)
    a = asp.add_parser("spectrum", parents=[common, trace])
    a.add_argument("--mask", required=True)
    a.add_argument("--post-rotation", action="store_true")
    a.add_argument("--max-distance", type=int, default=2)
    a = asp.add_parser("geometry", parents=[common, trace])
    a.add_argument("--perturbed", required=True)
    a.add_argument("--selection", choices=["shifted", "all"], default="shifted")
    a.add_argument("--threshold", type=float, default=0.01)
    a = asp.add_parser("sinks", parents=[common, trace])
    a.add_argument("--perturbed", required=True)
    a.add_argument("--threshold", type=float, default=0.01)
    a = asp.add_parser("delta-attn", parents=[common, trace])
    a.add_argument("--perturbed", required=True)
    a.add_argument("--layer", type=int, default=0)
    a.add_argument("--head", type=int, default=0)
    a.add_argument("--batch", type=int, default=0)
    a.add_argument("--freqs", help="comma list of frequency indices to keep in dQ/dK")
    a = asp.add_parser("mask-rank", parents=[common])
    a.add_argument("--mask", required=True)
    a.add_argument("--checkpoint")
    a = asp.add_parser("diag-dominance", parents=[common])
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--tom")
    a.add_argument("--corpus")
    a.add_argument("--n", type=int, default=64)
    a.add_argument("--window", type=int, default=64)
    a.add_argument("--per-matrix", type=int, default=20)
    q.set_defaults(func=cmd_analyze)

    q = sp.add_parser("eval", help="behavioral evaluations")
    esp = q.add_subparsers(dest="sub", required=True)
    e = esp.add_parser("ppl", parents=[common])
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--window", type=int, default=64)
    e = esp.add_parser("localization", parents=[common])
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--n", type=int, default=100)
    e.add_argument("--lengths", help="grid or comma list of segment lengths")
    e = esp.add_parser("tom", parents=[common])
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tom", required=True)
    q.set_defaults(func=cmd_eval)

    q = sp.add_parser("sweep", parents=[common], help="kappa sweep of the combined mask")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--task-sensitivity", required=True)
    q.add_argument("--general-sensitivity", required=True)
    q.add_argument("--tom", required=True)
    q.add_argument("--corpus", required=True, help="perplexity corpus")
    q.add_argument("--localization-corpus")
    q.add_argument("--localization-n", type=int, default=100)
    q.add_argument("--window", type=int, default=64)
    q.add_argument("--grid", default="0:5e-5:2e-6")
    q.add_argument("--force", action="store_true")
    q.set_defaults(func=cmd_sweep)

    q = sp.add_parser("report", parents=[common], help="index earlier runs")
    q.add_argument("runs", nargs="+")
    q.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print(json.dumps({"error": "ValueError", "message": "--threads must be >= 1"}), file=sys.stderr)
        return 2
    for var in _THREAD_VARS:
        os.environ[var] = str(args.threads)
    run = None
    try:
        run = Run(args)
        args.func(run, args)
        with open(os.path.join(run.dir, "run.json"), "w", encoding="utf-8") as f:
            json.dump(run.stanza("ok"), f, indent=2, sort_keys=True, default=str)
        print(run.dir)
        return 0
    except Exception as e:  # every failure becomes a machine-readable record
        err = {"error": type(e).__name__, "message": str(e), "command": args.command}
        if run is not None:
            with open(os.path.join(run.dir, "error.json"), "w", encoding="utf-8") as f:
                json.dump(dict(err, traceback=traceback.format_exc()), f, indent=2, sort_keys=True)
            with open(os.path.join(run.dir, "run.json"), "w", encoding="utf-8") as f:
                json.dump(run.stanza("error", err), f, indent=2, sort_keys=True, default=str)
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
