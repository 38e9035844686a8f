"""
tabdiff command line. Every subcommand works inside one run directory and
names its artifact after a hash of the config sections (and seed) it depends
on, so a changed config never silently reuses a stale artifact:

    gen-data       data-<h>/        toy tables (or ingested VOC data), train + reference splits, voc/ PNG + XML
    render-masks   masks-<h>/       binary structure masks for every annotation
    train-vae      vae-<h>.tdw      autoencoder weights + scale factor
    cache-latents  latents-<h>.tdlc scaled image (and mask) latents
    train-dit      dit-<h>/         metrics.csv and ckpt-<iteration>/ checkpoints
    sample         samples-<h>/     sample_*.png (+ overlay_*.png), samples.jsonl
    evaluate       eval-<h>.json    Fréchet distance and structure adherence
    export         export-<h>/      detector-ready images, VOC XML, YOLO labels, index.jsonl
"""
import argparse
import dataclasses
import hashlib
import json
import os
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from tqdm import tqdm

from tabdiff import numerics as nx
from tabdiff.annotations import (StructureMask, TableAnnotation, generate_toy_table, load_image_png, load_voc_dir,
                                 mask_to_annotation, overlay_mask, random_structure, render_mask, save_image_png,
                                 write_voc_xml)
from tabdiff.autoencoder import (LatentCache, cache_latents, load_vae, reconstruction_psnr, save_vae, train_vae)
from tabdiff.config import RunConfig, config_hash
from tabdiff.diffusion import latest_checkpoint, load_checkpoint, sample_batch, train_loop
from tabdiff.errors import ConfigError, MissingArtifactError, TabDiffError
from tabdiff.evaluation import (evaluation_report, export_detection_dataset, extract_features, frechet_distance,
                                gaussian_stats, structure_adherence, write_report)
from tabdiff.runlog import MetricsWriter, RunLog
from tabdiff.schedule import build_schedule

SEED_REQUIRED = {"train-vae", "train-dit", "sample"}

# -----------------------------------------------------------------------------
# Run directory

def _h(*parts) -> str:
    return config_hash(*(dataclasses.asdict(p) if dataclasses.is_dataclass(p) else p for p in parts))

@contextmanager
def staged(path: Path):
    """Yield a temp sibling of `path`; on success it replaces `path` in one rename."""
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    _remove(tmp)
    if not path.suffix:
        tmp.mkdir(parents=True)
    try:
        yield tmp
    except BaseException:
        _remove(tmp)
        raise
    _remove(path)
    os.replace(tmp, path)

def _remove(path: Path):
    if path.is_dir():
        shutil.rmtree(path)
    elif path.exists():
        path.unlink()

class Run:
    def __init__(self, args, config: RunConfig):
        self.args = args
        self.config = config
        self.seed = config.train.seed
        self.force = args.force
        self.dir = Path(args.run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.log = RunLog(self.dir)

    def skip(self, path: Path) -> bool:
        if path.exists() and not self.force:
            self.log.log(f"{path.name} exists, skipping (use --force to regenerate)", console=True)
            return True
        return False

    def need(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(path, produced_by)
        return path

    # artifact names

    def data_dir(self) -> Path:
        return self.dir / f"data-{_h(self.config.data, self.seed)}"

    def masks_dir(self) -> Path:
        return self.dir / f"masks-{_h(self.data_dir().name)}"

    def vae_path(self) -> Path:
        return self.dir / f"vae-{_h(self.data_dir().name, self.config.vae, self.seed)}.tdw"

    def cache_path(self) -> Path:
        return self.dir / f"latents-{_h(self.vae_path().name, self.config.train.conditional)}.tdlc"

    def dit_dir(self) -> Path:
        c = self.config
        return self.dir / f"dit-{_h(self.cache_path().name, c.train, c.schedule, c.dit_config().to_dict())}"

    def samples_dir(self) -> Path:
        a = self.args
        mask = getattr(a, "mask", None)
        mask_digest = hashlib.sha256(Path(mask).read_bytes()).hexdigest() if mask and Path(mask).exists() else None
        key = _h(self.dit_dir().name, self.config.sample, self.seed, mask_digest, getattr(a, "seeds", None))
        return self.dir / f"samples-{key}"

    def eval_path(self) -> Path:
        return self.dir / f"eval-{_h(self.samples_dir().name, self.config.eval)}.json"

    def export_dir(self) -> Path:
        return self.dir / f"export-{_h(self.samples_dir().name, self.config.export)}"

# -----------------------------------------------------------------------------
# Stored splits

def _save_split(d: Path, split: str, images: np.ndarray, annotations: list[TableAnnotation]):
    """uint8 .npy for training plus a VOC directory (PNG + XML per table) under d/voc/."""
    np.save(d / f"{split}_images.npy", np.round(np.clip(images, 0, 1) * 255).astype(np.uint8))
    voc = d / "voc"
    voc.mkdir(exist_ok=True)
    for i, (img, y) in enumerate(zip(images, annotations)):
        name = f"{split}_{i:06d}"
        save_image_png(img, voc / f"{name}.png")
        (voc / f"{name}.xml").write_bytes(write_voc_xml(y, f"{name}.png", folder="voc"))
    with open(d / f"{split}_annotations.jsonl", "w") as f:
        for y in annotations:
            f.write(json.dumps(y.to_dict(), sort_keys=True) + "\n")

def load_split(d: Path, split: str) -> tuple[np.ndarray, list[TableAnnotation]]:
    images = np.load(d / f"{split}_images.npy").astype(np.float32) / 255.0
    with open(d / f"{split}_annotations.jsonl") as f:
        annotations = [TableAnnotation.from_dict(json.loads(line)) for line in f if line.strip()]
    return images, annotations

def load_masks(d: Path, split: str) -> list[StructureMask]:
    bits = np.load(d / f"{split}_masks.npy")
    return [StructureMask(b.shape[0], b.shape[1], b) for b in bits]

def load_samples(d: Path) -> tuple[list[np.ndarray], list[TableAnnotation], list[str]]:
    images, targets, names = [], [], []
    with open(d / "samples.jsonl") as f:
        for line in f:
            e = json.loads(line)
            images.append(load_image_png(d / e["image"]))
            targets.append(TableAnnotation.from_dict(e["annotation"]))
            names.append(Path(e["image"]).stem)
    return images, targets, names

# -----------------------------------------------------------------------------
# Subcommands

def gen_data(run: Run) -> Path:
    out = run.data_dir()
    if run.skip(out):
        return out
    d = run.config.data
    total = d.count + d.holdout
    if d.voc_dir is not None:
        items = load_voc_dir(d.voc_dir, d.image_dir, size=(d.height, d.width))
        if len(items) < total:
            raise ConfigError(f"data.voc_dir has {len(items)} annotated images, need count + holdout = {total}")
        images = np.stack([img for img, _, _ in items[:total]])
        annotations = [y for _, y, _ in items[:total]]
    else:
        c = d.constraints()
        images, annotations = np.zeros((total, 3, d.height, d.width), dtype=np.float32), []
        for i in tqdm(range(total), desc="gen-data"):
            y = random_structure(nx.derive_seed(run.seed, "structure", i), c)
            images[i] = generate_toy_table(y, nx.derive_seed(run.seed, "style", i), c.line_thickness[1])
            annotations.append(y)
    with staged(out) as tmp:
        _save_split(tmp, "train", images[:d.count], annotations[:d.count])
        _save_split(tmp, "reference", images[d.count:], annotations[d.count:])
    run.log.log(f"gen-data: {d.count} train + {d.holdout} reference images -> {out}", console=True)
    return out

def render_masks(run: Run) -> Path:
    data = run.need(run.data_dir(), "gen-data")
    out = run.masks_dir()
    if run.skip(out):
        return out
    d = run.config.data
    with staged(out) as tmp:
        (tmp / "png").mkdir()
        for split in ("train", "reference"):
            _, annotations = load_split(data, split)
            masks = [render_mask(y, d.height, d.width) for y in tqdm(annotations, desc=f"render-masks {split}")]
            bits = np.stack([m.bits for m in masks]) if masks else np.zeros((0, d.height, d.width), np.uint8)
            np.save(tmp / f"{split}_masks.npy", bits)
            for i, m in enumerate(masks):
                m.save_png(tmp / "png" / f"{split}_{i:06d}.png")
    run.log.log(f"render-masks: -> {out}", console=True)
    return out

def train_vae_cmd(run: Run) -> Path:
    data = run.need(run.data_dir(), "gen-data")
    out = run.vae_path()
    if run.skip(out):
        return out
    images, _ = load_split(data, "train")
    metrics = MetricsWriter(out.with_name(out.stem + ".metrics.csv"))
    vae, losses = train_vae(images, run.config.vae, run.seed, log=run.log, metrics=metrics)
    with staged(out) as tmp:
        save_vae(vae, tmp)
    ref, _ = load_split(data, "reference")
    check = ref if len(ref) else images[:256]
    run.log.log(f"train-vae: final loss {losses[-1]:.5f} scale_factor {float(vae.scale_factor):.5f} "
                f"median PSNR {float(np.median(reconstruction_psnr(check, vae))):.2f} dB -> {out}", console=True)
    return out

def cache_latents_cmd(run: Run) -> Path:
    data = run.need(run.data_dir(), "gen-data")
    vae = load_vae(run.need(run.vae_path(), "train-vae"))
    out = run.cache_path()
    if run.skip(out):
        return out
    images, _ = load_split(data, "train")
    masks = load_masks(run.need(run.masks_dir(), "render-masks"), "train") if run.config.train.conditional else None
    cache_latents(images, masks, vae, out, progress=True)
    run.log.log(f"cache-latents: {len(images)} samples (masks: {masks is not None}) -> {out}", console=True)
    return out

def train_dit(run: Run) -> Path:
    cache_path = run.need(run.cache_path(), "cache-latents")
    vae = load_vae(run.need(run.vae_path(), "train-vae"))
    out = run.dit_dir()
    c = run.config
    resume = None
    if out.exists() and run.force:
        _remove(out)
    last = latest_checkpoint(out) if out.exists() else None
    if last is not None:
        resume = load_checkpoint(last)
        if resume.iteration >= c.train.iterations:
            run.log.log(f"{out.name} complete at iteration {resume.iteration}, skipping", console=True)
            return out
        run.log.log(f"resuming from {last}", console=True)
    with LatentCache(cache_path) as cache:
        ckpt = train_loop(c.train, cache, vae, out, schedule=build_schedule(**dataclasses.asdict(c.schedule)),
                          dit_config=c.dit_config(), resume=resume, log=run.log, progress=True)
    run.log.log(f"train-dit: {ckpt.iteration} iterations -> {out}", console=True)
    return out

def _parse_seeds(text: str) -> list[int]:
    try:
        return [_seed(s.strip()) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma separated list of integers, got {text!r}") from None
    except argparse.ArgumentTypeError as e:
        raise ConfigError(f"--seeds: {e}") from None

def sample_cmd(run: Run) -> Path:
    seeds = _parse_seeds(run.args.seeds) if run.args.seeds else None
    dit_dir = run.need(run.dit_dir(), "train-dit")
    last = latest_checkpoint(dit_dir)
    if last is None:
        raise MissingArtifactError(dit_dir / "ckpt-*", "train-dit")
    out = run.samples_dir()
    if run.skip(out):
        return out
    ckpt = load_checkpoint(last)
    s, a = run.config.sample, run.args
    if seeds is None and s.seeds is not None:
        seeds = list(s.seeds)
    elif seeds is None:
        seeds = [nx.derive_seed(run.seed, "sample", i) for i in range(s.count)]
    if a.mask and not ckpt.conditional:
        raise ConfigError(f"{last} is unconditional; --mask is not accepted")
    if a.mask:
        mask = StructureMask.load_png(run.need(Path(a.mask), "render-masks"))
        masks = [mask] * len(seeds)
        targets = [mask_to_annotation(mask)] * len(seeds)
    else:
        _, reference = load_split(run.need(run.data_dir(), "gen-data"), "reference")
        if not reference:
            raise ConfigError("sampling without --mask draws targets from the reference split; data.holdout is 0")
        targets = [reference[i % len(reference)] for i in range(len(seeds))]
        masks = [render_mask(y, ckpt.image_size, ckpt.image_size) for y in targets]
    with staged(out) as tmp:
        entries = []
        for i in tqdm(range(0, len(seeds), s.batch_size), desc="sample"):
            batch_seeds = seeds[i:i + s.batch_size]
            images, _ = sample_batch(masks[i:i + s.batch_size] if ckpt.conditional else None, ckpt, batch_seeds,
                                     s.steps, s.eta, keep_trajectory=False)
            for j, img in enumerate(images):
                k = i + j
                save_image_png(img, tmp / f"sample_{k:04d}.png")
                if a.overlay:
                    save_image_png(overlay_mask(img, masks[k]), tmp / f"overlay_{k:04d}.png")
                entries.append(dict(index=k, seed=seeds[k], image=f"sample_{k:04d}.png",
                                    annotation=targets[k].to_dict()))
        with open(tmp / "samples.jsonl", "w") as f:
            f.writelines(json.dumps(e, sort_keys=True) + "\n" for e in entries)
    run.log.log(f"sample: {len(seeds)} images from {last.name} ({s.steps} steps) -> {out}", console=True)
    return out

def evaluate_cmd(run: Run) -> Path:
    samples = Path(run.args.samples) if run.args.samples else run.samples_dir()
    run.need(samples / "samples.jsonl", "sample")
    out = Path(run.args.out) if run.args.out else run.eval_path()
    if run.skip(out):
        return out
    generated, targets, _ = load_samples(samples)
    reference, _ = load_split(run.need(run.data_dir(), "gen-data"), "reference")
    e = run.config.eval
    frechet = None
    if len(generated) >= 2 and len(reference) >= 2:
        frechet = frechet_distance(gaussian_stats(extract_features(generated, e.extractor)),
                                   gaussian_stats(extract_features(reference, e.extractor)))
    adherence = structure_adherence(generated, targets, threshold=e.iou_threshold)
    report = evaluation_report(e.extractor, len(generated), len(reference), frechet, adherence)
    write_report(report, out)
    run.log.log(f"evaluate: frechet {report['frechet']} row_f1 {report['row_f1']:.4f} col_f1 {report['col_f1']:.4f} "
                f"-> {out}", console=True)
    return out

def export_cmd(run: Run) -> Path:
    samples = Path(run.args.samples) if run.args.samples else run.samples_dir()
    run.need(samples / "samples.jsonl", "sample")
    out = Path(run.args.out) if run.args.out else run.export_dir()
    if run.skip(out):
        return out
    images, targets, names = load_samples(samples)
    x = run.config.export
    with staged(out) as tmp:
        export_detection_dataset(list(zip(images, targets)), tmp, names=names, merge_voc_dir=x.merge_voc_dir,
                                 merge_image_dir=x.merge_image_dir, progress=True)
    run.log.log(f"export: {len(images)} samples -> {out}", console=True)
    return out

COMMANDS = {
    "gen-data": gen_data,
    "render-masks": render_masks,
    "train-vae": train_vae_cmd,
    "cache-latents": cache_latents_cmd,
    "train-dit": train_dit,
    "sample": sample_cmd,
    "evaluate": evaluate_cmd,
    "export": export_cmd,
}

# -----------------------------------------------------------------------------
# Entry point

def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < nx.U64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v

def _set_threads(value: str | None):
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"TD_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"TD_THREADS must be a positive integer, got {value!r}")
    torch.set_num_threads(n)

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabdiff", description="Mask-conditioned latent diffusion for table images")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config (defaults apply to missing keys)")
        p.add_argument("--run-dir", default="runs/default", help="directory holding every artifact of the run")
        p.add_argument("--seed", type=_seed, help="run seed (required for train-vae, train-dit, sample)")
        p.add_argument("--force", action="store_true", help="regenerate the artifact even if it exists")
        p.add_argument("--preset", choices=["paper-256", "paper-512", "desk-64"], help="DiT preset and image size")
        p.add_argument("--unconditional", action="store_true", help="4-channel model without mask conditioning")
        if name in ("gen-data", "sample"):
            p.add_argument("--count", type=int, help="override data.count / sample.count")
        if name == "sample":
            p.add_argument("--mask", help="condition every sample on this mask PNG")
            p.add_argument("--seeds", help="comma separated sample seeds, one image each")
            p.add_argument("--overlay", action="store_true", help="also write mask-over-image composites")
        if name in ("evaluate", "export"):
            p.add_argument("--samples", help="samples directory (default: the one this config produces)")
            p.add_argument("--out", help="output path (default: content-addressed in the run dir)")
    return parser

def resolve_config(args) -> RunConfig:
    config = RunConfig.load(args.config)
    if args.preset:
        config = config.with_preset(args.preset)
    if args.unconditional:
        config = config.with_conditioning(False)
    if getattr(args, "count", None) is not None:
        if args.command == "gen-data":
            config = dataclasses.replace(config, data=dataclasses.replace(config.data, count=args.count))
        else:
            config = dataclasses.replace(config, sample=dataclasses.replace(config.sample, count=args.count, seeds=None))
    if args.seed is not None:
        config = dataclasses.replace(config, train=dataclasses.replace(config.train, seed=args.seed))
    return config

def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in SEED_REQUIRED and args.seed is None:
        parser.error(f"{args.command} requires --seed")
    try:
        _set_threads(os.environ.get("TD_THREADS"))
        config = resolve_config(args)
        run = Run(args, config)
        run.log.header(sys.argv if argv is None else ["tabdiff"] + list(argv))
        (run.dir / "config.resolved.json").write_text(config.to_json())
        COMMANDS[args.command](run)
    except (TabDiffError, OSError, ValueError) as e:
        kind = getattr(e, "kind", "io" if isinstance(e, OSError) else "value")
        print(f"tabdiff: error: {kind}: {e}", file=sys.stderr)
        if isinstance(e, ConfigError):
            return 2
        if isinstance(e, MissingArtifactError):
            return 3
        return 1
    return 0
