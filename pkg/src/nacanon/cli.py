"""Command-line entry point: ``nacanon <gen-corpus|train|anonymize|attack|evaluate> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import Config, ConfigError, describe_keys

log = logging.getLogger("nacanon")

CONFIG_FILE = "config.txt"


class UsageError(Exception):
    """Bad invocation: reported with exit code 2."""


# ---------------------------------------------------------------- helpers


def _config(args, bundle: Path | None = None) -> Config:
    base = Config()
    if args.config:
        base = Config.load(args.config)
    elif bundle is not None and (bundle / CONFIG_FILE).exists():
        base = Config.load(bundle / CONFIG_FILE)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = raw.strip()
    if overrides:
        base = Config.from_text(base.to_text() + "".join(f"{k}={v}\n" for k, v in overrides.items()))
    return base


def _fresh_dir(path: Path, force: bool) -> Path:
    if path.exists() and (not path.is_dir() or any(path.iterdir())) and not force:
        raise UsageError(f"{path} exists and is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(path) -> list:
    from .corpus import read_manifest

    p = Path(path)
    if not p.is_file():
        raise UsageError(f"manifest not found: {p}")
    try:
        return read_manifest(p)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read manifest {p}: {exc}") from exc


def _bundle(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"bundle directory not found: {p}")
    return p


def _load_system(bundle: Path, config: Config):
    from .anon import AnonPolicy, AnonSystem

    return AnonSystem.load(bundle, config.temperature, AnonPolicy(seed=config.anon_seed))


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(args) -> int:
    from .corpus import generate_corpus, write_corpus

    config = _config(args)
    out = _fresh_dir(Path(args.out_dir), args.force)
    utts = generate_corpus(config)
    manifest = write_corpus(utts, out)
    _write_text(out / CONFIG_FILE, config.to_text())
    print(f"wrote {len(utts)} utterances, manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    from .corpus import split_corpus
    from .pipeline import train_system

    config = _config(args)
    utts = _manifest(args.manifest)
    out = _fresh_dir(Path(args.out_dir), args.force)
    external = split_corpus(utts, config)["external"]
    system, losses = train_system(config, external, progress=log.info)
    system.save(out)
    _write_text(out / CONFIG_FILE, config.to_text())
    for name, trace in losses.items():
        print(f"{name}: final loss {float(trace[-1]):.4f}")
    return 0


def cmd_anonymize(args) -> int:
    from .anon import AnonPolicy, Level, anonymize, select_pseudo_speaker
    from .dsp import read_wav, write_wav

    bundle = _bundle(args.bundle)
    config = _config(args, bundle)
    seed = config.anon_seed if args.seed is None else args.seed
    system = _load_system(bundle, config).with_policy(AnonPolicy(Level(args.level), seed))
    if args.manifest:
        jobs = [(u.utt_id, u.speaker_id, u.waveform) for u in _manifest(args.manifest)]
        out_dir = _fresh_dir(Path(args.out), args.force)
        targets = [out_dir / f"{uid}.wav" for uid, _, _ in jobs]
    else:
        if not args.wav:
            raise UsageError("give --wav or --manifest")
        wav_path = Path(args.wav)
        if not wav_path.is_file():
            raise UsageError(f"input WAV not found: {wav_path}")
        uid = args.utterance_id or wav_path.stem
        jobs = [(uid, args.speaker_id or uid, read_wav(wav_path))]
        targets = [Path(args.out)]
    for (uid, spk, wav), target in zip(jobs, targets):
        idx = select_pseudo_speaker(system.pool, system.policy, spk, uid)
        log.info("%s (speaker %s) -> prompt %d (%s)", uid, spk, idx, system.pool[idx].prompt_id)
        write_wav(anonymize(system, wav, spk, uid), target)
    print(f"anonymized {len(jobs)} utterance(s)")
    return 0


def cmd_attack(args) -> int:
    from .anon import AnonPolicy, anonymize
    from .corpus import split_corpus
    from .evaluation import score_trials, semi_informed_attack

    bundle = _bundle(args.bundle)
    config = _config(args, bundle)
    if args.attacker_seed is not None:
        config = config.with_overrides(attacker_seed=args.attacker_seed)
    _warn_seeds(config)
    split = split_corpus(_manifest(args.manifest), config)
    system = _load_system(bundle, config)
    out = _fresh_dir(Path(args.out_dir), args.force)
    triple = lambda us: [(u.utt_id, u.speaker_id, u.waveform) for u in us]
    external, enroll, trial = triple(split["external"]), triple(split["enroll"]), triple(split["trial"])
    defender = system.with_policy(AnonPolicy(seed=config.anon_seed))
    trial_anon = [(u, s, anonymize(defender, w, s, u)) for u, s, w in trial]
    original = score_trials(external, enroll, trial, system.rvq.spec, system.rvq.n_cepstra)
    attacked, _ = semi_informed_attack(system, enroll, trial_anon, external, config.attacker_seed)
    _write_text(out / "scores_original.tsv", original.to_text())
    _write_text(out / "scores_anonymized.tsv", attacked.to_text())
    print(f"EER original {original.eer:.4f}  anonymized {attacked.eer:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    from .corpus import split_corpus
    from .dsp import write_wav
    from .pipeline import run_evaluation

    bundle = _bundle(args.bundle)
    config = _config(args, bundle)
    if args.attacker_seed is not None:
        config = config.with_overrides(attacker_seed=args.attacker_seed)
    _warn_seeds(config)
    split = split_corpus(_manifest(args.manifest), config)
    system = _load_system(bundle, config)
    out = _fresh_dir(Path(args.out_dir), args.force)
    result = run_evaluation(system, config, split, progress=log.info)
    (out / "anonymized").mkdir(exist_ok=True)
    for uid, _, wav in result.anonymized_trials:
        write_wav(wav, out / "anonymized" / f"{uid}.wav")
    _write_text(out / "report.txt", result.report.to_text())
    _write_text(out / "scores_original.tsv", result.original_attack.to_text())
    _write_text(out / "scores_anonymized.tsv", result.anonymized_attack.to_text())
    _write_text(out / "prompts.tsv", "".join(f"{u}\t{system.pool[i].prompt_id}\n" for u, i in sorted(result.prompt_choices.items())))
    print(result.report.to_text(), end="")
    return 0


def _warn_seeds(config: Config) -> None:
    if config.attacker_seed == config.anon_seed:
        log.warning("attacker_seed equals anon_seed: the attacker reproduces the defender's pseudo-speakers "
                    "(unrealistically strong attack)")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (defaults below)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="nacanon",
        description="Speaker anonymization with codec tokens and token language models.",
        epilog="config keys (defaults):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter
    epilog = "config keys (defaults):\n" + describe_keys()

    p = sub.add_parser("gen-corpus", parents=[common], help="write the synthetic corpus", epilog=epilog, formatter_class=fmt)
    p.add_argument("out_dir")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", parents=[common], help="train a system bundle", epilog=epilog, formatter_class=fmt)
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("anonymize", parents=[common], help="anonymize a WAV or a manifest", epilog=epilog, formatter_class=fmt)
    p.add_argument("bundle")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--wav", help="input WAV (16-bit mono)")
    src.add_argument("--manifest", help="corpus manifest; every utterance is anonymized")
    p.add_argument("--out", required=True, help="output WAV (with --wav) or directory (with --manifest)")
    p.add_argument("--speaker-id", help="speaker id of --wav (default: file stem)")
    p.add_argument("--utterance-id", help="utterance id of --wav (default: file stem)")
    p.add_argument("--level", choices=["speaker", "utterance"], default="speaker")
    p.add_argument("--seed", type=int, help="master seed (default: anon_seed)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_anonymize)

    for name, func, helptext in (("attack", cmd_attack, "run the semi-informed attack and write score files"),
                                 ("evaluate", cmd_evaluate, "full evaluation report")):
        p = sub.add_parser(name, parents=[common], help=helptext, epilog=epilog, formatter_class=fmt)
        p.add_argument("bundle")
        p.add_argument("manifest")
        p.add_argument("out_dir")
        p.add_argument("--attacker-seed", type=int)
        p.add_argument("--force", action="store_true")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime failure
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
