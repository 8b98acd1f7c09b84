"""Command-line entry point for datasets, training, generation and serving."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, DataSpec, ModelConfig, RunConfig
from .data import (DatasetValidationError, Vocabulary, generate_synthetic_dataset,
                   load_dataset, make_classifier_frames, save_dataset, save_image)
from .evaluation import evaluate_stories, train_char_classifier, write_eval_report
from .gan import (GanModel, GanTrainer, gan_generate_stories, load_gan_checkpoint,
                  save_gan_checkpoint)
from .tokenizer import VqVae, reconstruction_mse, train_vqvae
from .training import (Trainer, load_checkpoint, save_checkpoint, write_run_record)
from .transformer import (SamplerConfig, StoryContinuationModel, generate_stories,
                          generate_story)

DATA_ROOT_ENV = "STORYGEN_DATA_ROOT"
VAE_CHECKPOINT_VERSION = 1


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    return cfg.apply_overrides(overrides) if overrides else cfg


def _data_root(args) -> Path:
    root = getattr(args, "data", None) or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no dataset given: pass --data or set {DATA_ROOT_ENV}")
    return Path(root)


def _require_spec(dataset) -> dict:
    spec = dataset.meta.get("spec")
    if not spec:
        raise ConfigError("dataset manifest carries no generation spec; "
                          "character metrics need one (use make-synthetic)")
    return spec


def save_vae_checkpoint(path: Path, vae: VqVae, history: list[dict], val_mse: float) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"version": VAE_CHECKPOINT_VERSION,
                "model_config": dataclasses.asdict(vae.config),
                "vae_state": vae.state_dict(),
                "final_loss": history[-1]["total"] if history else None,
                "val_mse": val_mse}, path)


# The tokenizer only depends on these config fields; transformer-side fields
# (retro_every, prompt_len, ...) may differ between runs sharing one vae.
VAE_CONFIG_FIELDS = ("image_size", "grid_size", "code_dim", "image_vocab",
                     "vae_channels")


def load_vae_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> VqVae:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"vae checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != VAE_CHECKPOINT_VERSION:
        raise ValueError(f"unsupported vae checkpoint version {payload.get('version')}")
    config = ModelConfig(**payload["model_config"])
    if expect is not None:
        stored, wanted = dataclasses.asdict(config), dataclasses.asdict(expect)
        diffs = [f"{k}: checkpoint={stored[k]} requested={wanted[k]}"
                 for k in VAE_CONFIG_FIELDS if stored[k] != wanted[k]]
        if diffs:
            raise ValueError("vae checkpoint config mismatch: " + "; ".join(diffs))
    vae = VqVae(config)
    vae.load_state_dict(payload["vae_state"])
    vae.eval()
    return vae


def _classifier(dataset, seed: int = 1234):
    spec_dict = _require_spec(dataset)
    spec = DataSpec(**spec_dict)
    frames, labels = make_classifier_frames(spec, seed=seed)
    n_classes = spec.n_chars + spec.n_unseen_chars
    return train_char_classifier(frames, labels, n_classes, seed=seed)


def cmd_make_synthetic(args) -> int:
    cfg = _run_config(args)
    if args.seed is not None:
        cfg = cfg.apply_overrides({"data.seed": str(args.seed)})
    dataset = generate_synthetic_dataset(cfg.data)
    out = Path(args.out)
    save_dataset(dataset, out)
    write_run_record(out, cfg, extra={"command": "make-synthetic",
                                      "counts": dataset.counts()})
    print(f"wrote {sum(dataset.counts().values())} stories to {out}")
    return 0


def cmd_train_vae(args) -> int:
    cfg = _run_config(args)
    if args.seed is not None:
        cfg = cfg.apply_overrides({"vae_train.seed": str(args.seed)})
    dataset = load_dataset(_data_root(args))
    train_frames = np.concatenate([s.frames for s in dataset.samples("train")])
    val_samples = dataset.samples("val") or dataset.samples("train")
    val_frames = np.concatenate([s.frames for s in val_samples])
    torch.manual_seed(cfg.vae_train.seed)
    vae = VqVae(cfg.model)
    history = train_vqvae(vae, train_frames, steps=cfg.vae_train.steps,
                          batch_size=cfg.vae_train.batch_size, lr=cfg.vae_train.lr,
                          seed=cfg.vae_train.seed, log_every=args.log_every)
    val_mse = reconstruction_mse(vae, val_frames)
    out = Path(args.out)
    save_vae_checkpoint(out / "vae.pt", vae, history, val_mse)
    write_run_record(out, cfg, extra={"command": "train-vae", "val_mse": val_mse})
    print(f"vae val mse {val_mse:.5f} -> {out / 'vae.pt'}")
    return 0


def _light_eval(model, vae, vocab, dataset, seed: int, n_stories: int = 8) -> dict:
    """Small validation pass used to stamp a model card onto checkpoints."""
    samples = dataset.samples("val")[:n_stories]
    if not samples:
        return {}
    clf, clf_report = _classifier(dataset, seed=1234)
    generated = generate_stories(model, vae, samples, vocab,
                                 SamplerConfig(seed=seed))
    metrics = evaluate_stories(clf, samples, [g.frames for g in generated])
    metrics["classifier"] = clf_report
    metrics["n_stories"] = len(samples)
    return metrics


def cmd_train(args) -> int:
    cfg = _run_config(args)
    overrides = {}
    if args.seed is not None:
        overrides["train.seed" if args.model == "retro" else "gan.seed"] = str(args.seed)
    if args.mode is not None:
        overrides["train.mode"] = args.mode
    if args.epochs is not None:
        key = "train.epochs" if args.model == "retro" else "gan.epochs"
        overrides[key] = str(args.epochs)
    if overrides:
        cfg = cfg.apply_overrides(overrides)
    root = _data_root(args)
    dataset = load_dataset(root)
    samples = dataset.samples("train")
    vocab = Vocabulary.build(dataset.all_captions("train"), cfg.model.text_vocab)
    out = Path(args.out)

    if args.model == "retro":
        if not args.vae:
            raise ConfigError("--vae is required when training the retro model")
        vae = load_vae_checkpoint(args.vae, expect=cfg.model)
        torch.manual_seed(cfg.train.seed)
        model = StoryContinuationModel(cfg.model)
        trainer = Trainer(model, vae, vocab, cfg.train)
        history = trainer.fit(samples, log_every=args.log_every)
        card = {
            "model_id": f"retro-{cfg.train.mode}",
            "config": dataclasses.asdict(cfg.model),
            "dataset": str(root),
            "seeds": {"train": cfg.train.seed, "vae": cfg.vae_train.seed},
            "intended_use": ("Research demo for desk-scale story continuation on "
                             "synthetic data; not suitable for production imagery."),
            "metrics": {} if args.no_eval else _light_eval(
                model, vae, vocab, dataset, cfg.train.seed),
        }
        save_checkpoint(out / "model.pt", model, vae, vocab, cfg.train,
                        history, model_card=card)
        write_run_record(out, cfg, history, extra={"command": "train", "model": "retro"})
        print(f"final epoch loss {history['epoch_loss'][-1]:.4f} -> {out / 'model.pt'}")
    else:
        torch.manual_seed(cfg.gan.seed)
        image_size = int(dataset.meta.get("image_size", cfg.data.image_size))
        n_frames = int(dataset.meta.get("frames_per_story", cfg.data.frames_per_story))
        gan = GanModel(cfg.gan, len(vocab), cfg.model.text_len,
                       cfg.model.max_frames, image_size, n_frames - 1)
        trainer = GanTrainer(gan, cfg.gan)
        history = trainer.fit(samples, vocab, cfg.model.text_len, checkpoint_dir=out)
        save_gan_checkpoint(out / "gan.pt", gan, vocab)
        write_run_record(out, cfg, history, extra={"command": "train", "model": "gan"})
        print(f"final generator loss {history['g_loss'][-1]:.4f} -> {out / 'gan.pt'}")
    return 0


def cmd_generate(args) -> int:
    model, vae, vocab, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(_data_root(args))
    sample = dataset.find(args.story)
    sampler = SamplerConfig(temperature=args.temperature, top_k=args.top_k, seed=args.seed)
    story = generate_story(model, vae, list(sample.captions), sample.source_frame,
                           vocab, sampler, sample.id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(story.frames, start=1):
        save_image(out / f"{sample.id}_t{t}.png", frame)
    write_run_record(out, _run_config(args),
                     extra={"command": "generate", "story": sample.id,
                            "sampler": dataclasses.asdict(sampler),
                            "checkpoint": str(args.checkpoint)})
    print(f"wrote {len(story.frames)} frames to {out}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = load_dataset(_data_root(args))
    samples = dataset.samples(args.split)
    if args.limit:
        samples = samples[:args.limit]
    if not samples:
        raise ConfigError(f"no samples in split {args.split!r}")
    clf, clf_report = _classifier(dataset)
    sampler = SamplerConfig(seed=args.seed)
    if args.model == "retro":
        model, vae, vocab, _ = load_checkpoint(args.checkpoint)
        generated = generate_stories(model, vae, samples, vocab, sampler)
        frames = [g.frames for g in generated]
    else:
        gan, vocab = load_gan_checkpoint(args.checkpoint)
        fake = gan_generate_stories(gan, samples, vocab,
                                    gan.captions.text_len, seed=args.seed)
        frames = [fake[i] for i in range(len(samples))]
    metrics = evaluate_stories(clf, samples, frames)
    metrics["classifier"] = clf_report
    out = Path(args.out)
    report = write_eval_report(out / "eval-report.json", str(_data_root(args)),
                               str(args.checkpoint), metrics, seeds=[args.seed])
    write_run_record(out, _run_config(args),
                     extra={"command": "evaluate", "split": args.split,
                            "checkpoint": str(args.checkpoint)})
    print(f"fid {metrics['fid']:.3f} char_f1 {metrics['char_f1']:.3f} "
          f"frame_acc {metrics['frame_acc']:.3f} -> {report}")
    return 0


def cmd_ablate(args) -> int:
    """Train and evaluate the minus-one grid over conditioning pathways."""
    variants = {
        "full": {},
        "no_cross_attention": {"model.retro_every": "0"},
        "no_story": {"model.use_story": "false"},
        "neither": {"model.retro_every": "0", "model.use_story": "false"},
    }
    base = _run_config(args)
    root = _data_root(args)
    dataset = load_dataset(root)
    samples = dataset.samples("train")
    eval_samples = dataset.samples(args.split)
    if args.limit:
        eval_samples = eval_samples[:args.limit]
    vocab = Vocabulary.build(dataset.all_captions("train"), base.model.text_vocab)
    clf, clf_report = _classifier(dataset)
    vae = load_vae_checkpoint(args.vae, expect=base.model)
    out = Path(args.out)
    results = {}
    for name, overrides in variants.items():
        cfg = base.apply_overrides(overrides) if overrides else base
        if args.seed is not None:
            cfg = cfg.apply_overrides({"train.seed": str(args.seed)})
        torch.manual_seed(cfg.train.seed)
        model = StoryContinuationModel(cfg.model)
        history = Trainer(model, vae, vocab, cfg.train).fit(samples)
        generated = generate_stories(model, vae, eval_samples, vocab,
                                     SamplerConfig(seed=cfg.train.seed))
        metrics = evaluate_stories(clf, eval_samples, [g.frames for g in generated])
        results[name] = {"metrics": metrics, "final_loss": history["epoch_loss"][-1]}
        print(f"{name}: fid {metrics['fid']:.3f} char_f1 {metrics['char_f1']:.3f} "
              f"corr {metrics['correlation']['mean']:.3f}")
    results["classifier"] = clf_report
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(results, indent=2))
    write_run_record(out, base, extra={"command": "ablate", "split": args.split})
    print(f"wrote {out / 'ablation.json'}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    app = create_app(args.checkpoint, data_root=args.data)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storygen",
                                     description="Story continuation models, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value")
        p.add_argument("--seed", type=int, default=None)
        if data:
            p.add_argument("--data", help=f"dataset root (default ${DATA_ROOT_ENV})")

    p = sub.add_parser("make-synthetic", help="generate the synthetic dataset")
    common(p, data=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train-vae", help="fit the image tokenizer")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train", help="train the story model")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=["retro", "gan"], default="retro")
    p.add_argument("--mode", choices=["finetune", "prompt"], default=None)
    p.add_argument("--vae", help="tokenizer checkpoint (retro model)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-eval", action="store_true",
                   help="skip the model-card evaluation pass")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="continue one story from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--story", required=True, help="story id in the dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=64)
    p.set_defaults(func=cmd_generate, seed=0)

    p = sub.add_parser("evaluate", help="run the metric suite on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=["retro", "gan"], default="retro")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_evaluate, seed=0)

    p = sub.add_parser("ablate", help="minus-one grid over conditioning pathways")
    common(p)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="HTTP demo service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root for gallery source frames")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, DatasetValidationError, FileNotFoundError, KeyError,
            ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
