"""Command-line front end.

    modaladapt gen-data  --config C [--seed N] [--out DIR]
    modaladapt train     --config C [--strategy S] [--seed N] [--out DIR] [--full-dims]
    modaladapt adapt     --config C --checkpoint P [--mode M] [--sizes 10,40,160] [--workers N]
    modaladapt eval      --checkpoint P --manifest M [--embeddings E ...] [--out DIR]
    modaladapt reproduce --profile multispeaker|adaptation-sweep [--config C] [--seeds K]
    modaladapt inspect   PATH

One experiment lives in one output directory (see README for the layout).
"""

import argparse
import json
import logging
import os
import struct
import sys

from .adaptation import EMBEDDING_MAGIC, load_embedding, save_embedding
from .data import (
    FEATURE_MAGIC,
    WAVE_MAGIC,
    SyntheticTaskSpec,
    generate_corpus,
    load_corpus,
)
from .experiments import (
    MODES,
    TABLE_STRATEGIES,
    ExperimentConfig,
    adaptation_sweep,
    ensure_dir,
    median_rows,
    speaker_mean_rows,
    text_predictor,
    train_strategy,
)
from .metrics import evaluate, read_report_csv, summarize, write_report_csv
from .model import (
    CHECKPOINT_MAGIC,
    CapabilityError,
    ConfigError,
    CorruptFile,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
)
from .training import PlanError

log = logging.getLogger("modaladapt")


class CommandError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("MODALADAPT_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args):
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.task = SyntheticTaskSpec(**{**cfg.task.to_dict(), "seed": args.seed})
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    if getattr(args, "full_dims", False):
        cfg.full_dims = True
    if getattr(args, "strategy", None):
        cfg.training = {**cfg.training, "strategy": args.strategy}
    cfg.validate()
    return cfg


def _manifest_path(cfg):
    if cfg.corpus:
        return cfg.corpus
    return os.path.join(cfg.output_dir, "corpus", "manifest.json")


def _corpus(cfg):
    path = _manifest_path(cfg)
    if not os.path.exists(path):
        log.info("no corpus at %s; generating", path)
        generate_corpus(cfg.task, os.path.dirname(path))
    return load_corpus(path)


def _snapshot_config(cfg):
    ensure_dir(cfg.output_dir)
    cfg.save(os.path.join(cfg.output_dir, "config.json"))


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _load_config(args)
    out = os.path.join(cfg.output_dir, "corpus")
    try:
        ensure_dir(out)
        generate_corpus(cfg.task, out)
        _snapshot_config(cfg)
    except OSError as e:
        raise CommandError(f"cannot write corpus to {out}: {e}") from None
    print(os.path.join(out, "manifest.json"))


def cmd_train(args):
    cfg = _load_config(args)
    corpus = _corpus(cfg)
    strategy = cfg.plan().strategy
    model, history = train_strategy(corpus, strategy, cfg.seed, cfg)
    models = ensure_dir(os.path.join(cfg.output_dir, "models"))
    ckpt = os.path.join(models, f"{strategy}.mmck")
    save_checkpoint(model, ckpt)
    history.to_csv(os.path.join(models, f"{strategy}_history.csv"))
    _snapshot_config(cfg)
    print(ckpt)


def _parse_sizes(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CommandError(f"--sizes must be a comma-separated list of integers: {text!r}") from None


def cmd_adapt(args):
    cfg = _load_config(args)
    corpus = _corpus(cfg)
    model = load_checkpoint(args.checkpoint)
    modes = [args.mode] if args.mode else list(cfg.adaptation.get("modes", MODES))
    if "unsupervised" in modes and not model.has_speech_encoder:
        raise CapabilityError("unsupervised adaptation needs a checkpoint with a speech encoder")
    sizes = _parse_sizes(args.sizes) if args.sizes else list(cfg.adaptation.get("sizes"))
    tag = os.path.splitext(os.path.basename(args.checkpoint))[0]
    rows, adapted = adaptation_sweep(model, corpus, sizes, modes, cfg.seed, tag, cfg.workers,
                                     cfg.adapt_opts())
    emb_dir = ensure_dir(os.path.join(cfg.output_dir, "embeddings", tag))
    for (spk, mode, n), res in sorted(adapted.items()):
        save_embedding(os.path.join(emb_dir, f"{spk}_{mode}_{n}.mmev"), res,
                       config_hash=model.config.digest(), extra={"model": tag})
    reports = ensure_dir(os.path.join(cfg.output_dir, "reports"))
    path = os.path.join(reports, f"adapt_{tag}_{'_'.join(modes)}.csv")
    write_report_csv(rows, path)
    print(path)


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.manifest)
    tag = os.path.splitext(os.path.basename(args.checkpoint))[0]
    strategy = model.meta.get("strategy", "")
    rows = evaluate(text_predictor(model), corpus.test, tag, strategy, "baseline", 0)
    for path in args.embeddings or []:
        header, vec = load_embedding(path)
        if header.get("config_hash") and header["config_hash"] != model.config.digest():
            raise CommandError(f"{path} was adapted on a different model configuration")
        spk = header["speaker"]
        test = corpus.select("test", speakers=[spk])
        if not test:
            raise CommandError(f"no test utterances for speaker {spk!r} from {path}")
        rows += evaluate(text_predictor(model, {spk: vec}), test, tag, strategy,
                         header.get("mode", "adapted"), header.get("n_utterances", 0))
    out = ensure_dir(args.out or ".")
    path = os.path.join(out, f"eval_{tag}.csv")
    write_report_csv(rows, path)
    print(path)


def _state(path):
    if os.path.exists(path):
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    return {"done": {}}


def _save_state(path, state):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(state, f, indent=1, sort_keys=True)
    os.replace(tmp, path)


def cmd_reproduce(args):
    cfg = _load_config(args)
    root = ensure_dir(cfg.output_dir)
    _snapshot_config(cfg)
    state_path = os.path.join(root, "reproduce_state.json")
    state = _state(state_path)
    state["profile"] = args.profile
    seeds = [cfg.seed + i for i in range(args.seeds)]
    strategies = TABLE_STRATEGIES if args.profile == "multispeaker" else ("JG",)
    if args.strategies:
        strategies = tuple(args.strategies.split(","))
    sizes = _parse_sizes(args.sizes) if args.sizes else list(cfg.adaptation.get("sizes"))
    per_seed = {}
    for seed in seeds:
        seed_dir = ensure_dir(os.path.join(root, f"seed{seed}"))
        task = SyntheticTaskSpec(**{**cfg.task.to_dict(), "seed": seed})
        manifest = os.path.join(seed_dir, "corpus", "manifest.json")
        if not os.path.exists(manifest):
            generate_corpus(task, os.path.dirname(manifest))
        corpus = load_corpus(manifest)
        rows = []
        for strategy in strategies:
            key = f"{seed}/{strategy}"
            report = os.path.join(seed_dir, "reports", f"{strategy}.csv")
            if state["done"].get(key) and os.path.exists(report):
                rows += read_report_csv(report)
                continue
            model, history = train_strategy(corpus, strategy, seed, cfg)
            ensure_dir(os.path.join(seed_dir, "models"))
            save_checkpoint(model, os.path.join(seed_dir, "models", f"{strategy}.mmck"))
            history.to_csv(os.path.join(seed_dir, "models", f"{strategy}_history.csv"))
            if args.profile == "multispeaker":
                srows = evaluate(text_predictor(model), corpus.test, strategy, strategy, "baseline", 0)
            else:
                modes = list(cfg.adaptation.get("modes", MODES))
                srows, _ = adaptation_sweep(model, corpus, sizes, modes, seed, strategy, cfg.workers,
                                            cfg.adapt_opts())
            ensure_dir(os.path.dirname(report))
            write_report_csv(srows, report)
            rows += srows
            state["done"][key] = True
            _save_state(state_path, state)
        if args.profile == "multispeaker":
            rows += speaker_mean_rows(corpus)
        per_seed[seed] = rows
    med = median_rows([per_seed[s] for s in seeds])
    name = "table_multispeaker.csv" if args.profile == "multispeaker" else "fig_adaptation_sweep.csv"
    write_report_csv(med, os.path.join(root, name))
    with open(os.path.join(root, name.replace(".csv", ".txt")), "w") as f:
        f.write(summarize(med))
    state["complete"] = True
    _save_state(state_path, state)
    print(os.path.join(root, name))


def cmd_inspect(args):
    with open(args.path, "rb") as f:
        head = f.read(5)
    if head == CHECKPOINT_MAGIC:
        header = read_checkpoint_header(args.path)
        info = {"format": "MMCK1", **header}
    elif head == EMBEDDING_MAGIC:
        header, vec = load_embedding(args.path)
        info = {"format": "MMEV1", **header}
    elif head == FEATURE_MAGIC:
        with open(args.path, "rb") as f:
            f.seek(5)
            frames, dim = struct.unpack("<II", f.read(8))
        info = {"format": "MMAF1", "frames": frames, "dim": dim}
    elif head == WAVE_MAGIC:
        with open(args.path, "rb") as f:
            f.seek(5)
            (n,) = struct.unpack("<I", f.read(4))
        info = {"format": "MMWV1", "samples": n}
    else:
        raise CorruptFile(f"{args.path}: unrecognised magic {head!r}")
    print(json.dumps(info, indent=1, sort_keys=True))


def build_parser():
    p = argparse.ArgumentParser(prog="modaladapt", description=__doc__.splitlines()[0] if __doc__ else None)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", help="experiment directory")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--full-dims", action="store_true",
                        help="hidden 1024 / embedding 128 instead of desk-scale dims")

    sp = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one strategy and write a checkpoint")
    common(sp)
    sp.add_argument("--strategy")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("adapt", help="adaptation sweep for held-out speakers")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--sizes", help="comma-separated adaptation set sizes")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("eval", help="objective evaluation on the test split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--embeddings", nargs="*")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("reproduce", help="full multi-seed pipeline")
    common(sp)
    sp.add_argument("--profile", choices=("multispeaker", "adaptation-sweep"), required=True)
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--sizes")
    sp.add_argument("--strategies", help="comma-separated subset of strategies")
    sp.set_defaults(func=cmd_reproduce)

    sp = sub.add_parser("inspect", help="print the header of a checkpoint/embedding/feature file")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CommandError, ConfigError, PlanError, CapabilityError, CorruptFile,
            FileNotFoundError, ValueError) as e:
        print(f"modaladapt {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
