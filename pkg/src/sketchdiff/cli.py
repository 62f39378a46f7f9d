"""Command-line surface: data generation, training, sampling, evaluation,
k sweeps, and serving.

Every run prints its fully resolved configuration as JSON and writes the
same content (plus a result summary) to a run-manifest file, so any output
can be regenerated from the manifest alone. Exit codes: 0 ok, 2 usage,
3 data error, 4 model/digest error, 5 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, DivergenceError, ModelError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_MODEL = 4
EXIT_DIVERGED = 5


def _log(msg: str) -> None:
    print(msg, flush=True)


def _write_run_manifest(path: Path, command: str, config: dict, results: dict) -> None:
    manifest = {"tool": "sketchdiff", "version": __version__, "command": command,
                "config": config, "results": results}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                    encoding="utf-8")
    _log(f"run manifest: {path}")


def _announce(command: str, config: dict) -> None:
    _log(json.dumps({"command": command, "config": config}, sort_keys=True))


def _class_id(name_or_id: str, class_names: list[str]) -> int:
    if name_or_id.isdigit():
        cid = int(name_or_id)
        if not 0 <= cid < len(class_names):
            raise ModelError(f"class id {cid} out of range; valid: "
                             f"{', '.join(class_names)}")
        return cid
    if name_or_id not in class_names:
        raise ModelError(f"unknown class {name_or_id!r}; valid: "
                         f"{', '.join(class_names)}")
    return class_names.index(name_or_id)


def _style_id(name: str | None, style_names: list[str]) -> int | None:
    if name is None:
        return None
    if name not in style_names:
        raise ModelError(f"unknown style {name!r}; valid: {', '.join(style_names)}")
    return style_names.index(name)


def cmd_gen_data(args) -> int:
    from .datasets import default_spec, gen_dataset
    config = {"out": args.out, "per_class": args.per_class, "seed": args.seed,
              "size": args.size, "force": args.force}
    _announce("gen-data", config)
    if args.size != 32:
        raise DataError("only --size 32 is supported in this build")
    spec = default_spec(per_class=args.per_class, seed=args.seed)
    manifest = gen_dataset(spec, args.out, force=args.force)
    n = len(manifest["items"])
    n_train = sum(1 for it in manifest["items"] if it["split"] == "train")
    _log(f"wrote {n} items ({n_train} train / {n - n_train} test) to {args.out}")
    _write_run_manifest(Path(args.out) / "run-manifest.json", "gen-data", config,
                        {"items": n, "train": n_train, "test": n - n_train})
    return EXIT_OK


def cmd_train_backbone(args) -> int:
    from .backbone import train_backbone
    from .datasets import load_dataset
    from .schedule import make_schedule
    config = {"data": args.data, "out": args.out, "ae_steps": args.ae_steps,
              "dn_steps": args.dn_steps, "batch": args.batch, "lr": args.lr,
              "channels": args.channels, "T": args.T, "seed": args.seed}
    _announce("train-backbone", config)
    dataset = load_dataset(args.data)
    sched = make_schedule(args.T)
    t0 = time.time()
    bundle = train_backbone(dataset, ae_steps=args.ae_steps, dn_steps=args.dn_steps,
                            batch_size=args.batch, lr=args.lr, channels=args.channels,
                            sched=sched, seed=args.seed, log=_log)
    digest = bundle.save(args.out)
    _log(f"backbone digest {digest}, recon PSNR {bundle.recon_psnr:.2f} dB, "
         f"{time.time() - t0:.0f}s")
    _write_run_manifest(Path(args.out).with_suffix(".run.json"), "train-backbone",
                        config, {
                            "content_digest": digest,
                            "recon_psnr": bundle.recon_psnr,
                            "final_ae_loss": bundle.autoencoder.losses_[-1],
                            "final_dn_loss": bundle.denoiser.losses_[-1],
                        })
    return EXIT_OK


def cmd_train_lctn(args) -> int:
    from .backbone import BackboneBundle
    from .datasets import load_dataset
    from .lctn import train_lctn
    config = {"data": args.data, "backbone": args.backbone, "out": args.out,
              "iters": args.iters, "lr": args.lr, "warmup": args.warmup,
              "batch": args.batch, "seed": args.seed}
    _announce("train-lctn", config)
    dataset = load_dataset(args.data)
    bundle = BackboneBundle.load(args.backbone)
    digest_before = bundle.check_digest()
    model = train_lctn(bundle, dataset, iters=args.iters, batch_size=args.batch,
                       lr=args.lr, warmup=args.warmup, seed=args.seed, log=_log)
    digest_after = bundle.check_digest()
    _log(f"backbone digest unchanged: {digest_before == digest_after} "
         f"({digest_after})")
    model.save(args.out, backbone_digest=digest_after)
    _write_run_manifest(Path(args.out).with_suffix(".run.json"), "train-lctn",
                        config, {
                            "backbone_digest": digest_after,
                            "digest_unchanged": digest_before == digest_after,
                            "report": model.report_,
                        })
    return EXIT_OK


def _load_models(backbone_path, lctn_path):
    from .backbone import BackboneBundle
    from .lctn import LatentCodeTranslator
    bundle = BackboneBundle.load(backbone_path)
    model = LatentCodeTranslator.load(lctn_path, bundle=bundle)
    return bundle, model


def cmd_sample(args) -> int:
    from . import pnm
    from .pipeline import SampleConfig, translate
    config = {"backbone": args.backbone, "lctn": args.lctn, "sketch": args.sketch,
              "class": getattr(args, "class"), "style": args.style, "k": args.k,
              "seed": args.seed, "mode": args.mode, "out": args.out,
              "also_direct": args.also_direct}
    _announce("sample", config)
    bundle, model = _load_models(args.backbone, args.lctn)
    sketch = pnm.gray_to_float(pnm.read_pgm(args.sketch))
    cfg = SampleConfig(class_id=_class_id(getattr(args, "class"), bundle.class_names),
                       seed=args.seed, k_ratio=args.k,
                       style_id=_style_id(args.style, bundle.style_names),
                       step_mode=args.mode, return_direct_decode=args.also_direct)
    res = translate(bundle, model, sketch, cfg)
    pnm.write_ppm(args.out, pnm.to_u8_hwc(res.image))
    outputs = {"image": args.out}
    if args.also_direct:
        direct_path = str(Path(args.out).with_suffix("")) + ".direct.ppm"
        pnm.write_ppm(direct_path, pnm.to_u8_hwc(res.direct_decode_image))
        outputs["direct"] = direct_path
    _log(f"k_used={res.k_used} z0={res.z0_digest} zk={res.zk_digest}")
    _write_run_manifest(Path(args.out).with_suffix(".run.json"), "sample", config,
                        {"k_used": res.k_used, "z0_digest": res.z0_digest,
                         "zk_digest": res.zk_digest, "outputs": outputs,
                         "timings_ms": {k: round(v, 2) for k, v in
                                        res.timings_ms.items()}})
    return EXIT_OK


def _fit_judge(dataset, seed):
    from .metrics import ShapeClassifier
    train = dataset.subset("train")
    judge = ShapeClassifier(n_classes=len(dataset.class_names),
                            steps=3000, seed=seed)
    judge.fit(train.images, train.class_ids)
    return judge


def cmd_eval(args) -> int:
    from .datasets import load_dataset
    from .metrics import EvalReport, psnr, silhouette_iou, ssim
    from .pipeline import SampleConfig, translate
    from .rng import Rng
    config = {"data": args.data, "backbone": args.backbone, "lctn": args.lctn,
              "k": args.k, "seed": args.seed, "out": args.out,
              "limit": args.limit}
    _announce("eval", config)
    dataset = load_dataset(args.data)
    bundle, model = _load_models(args.backbone, args.lctn)
    judge = _fit_judge(dataset, seed=args.seed)
    test = dataset.subset("test")
    judge_real_acc = judge.score(test.images, test.class_ids)
    n = test.n if args.limit is None else min(args.limit, test.n)
    psnrs, ssims, ious, images = [], [], [], []
    for i in range(n):
        cfg = SampleConfig(class_id=int(test.class_ids[i]),
                           seed=Rng(args.seed).draw_seed("eval", str(i)),
                           k_ratio=args.k)
        res = translate(bundle, model, test.edges[i], cfg)
        images.append(res.image)
        psnrs.append(psnr(test.images[i], res.image))
        ssims.append(ssim(test.images[i], res.image))
        ious.append(silhouette_iou(res.image, test.edges[i]))
    gen = np.stack(images)
    labels = test.class_ids[:n]
    report = EvalReport(n=n, k_ratio=args.k, judge_real_acc=judge_real_acc)
    report.add("psnr", psnrs)
    report.add("ssim", ssims)
    report.add("iou", ious)
    if judge_real_acc >= 0.95:  # judge-validity gate
        report.add("acc", [judge.score(gen, labels)])
        report.add("confidence", judge.confidence(gen, labels))
        for cid, cname in enumerate(dataset.class_names):
            mask = labels == cid
            if mask.any():
                report.per_class_acc[cname] = judge.score(gen[mask], labels[mask])
    payload = report.to_json()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(payload + "\n", encoding="utf-8")
    _log(payload)
    _write_run_manifest(Path(args.out).with_suffix(".run.json"), "eval", config,
                        {"report": args.out})
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    from .datasets import load_dataset
    from .pipeline import sweep_k
    config = {"data": args.data, "backbone": args.backbone, "lctn": args.lctn,
              "from": getattr(args, "from"), "to": args.to, "points": args.points,
              "seed": args.seed, "limit": args.limit, "out": args.out}
    _announce("sweep-k", config)
    dataset = load_dataset(args.data)
    bundle, model = _load_models(args.backbone, args.lctn)
    judge = _fit_judge(dataset, seed=args.seed)
    test = dataset.subset("test")
    n = test.n if args.limit is None else min(args.limit, test.n)
    ratios = np.linspace(getattr(args, "from"), args.to, args.points)
    rows = sweep_k(bundle, model, test.edges[:n], test.class_ids[:n],
                   [float(r) for r in ratios], seed=args.seed, judge=judge)
    payload = json.dumps({"n_sketches": n, "rows": rows}, sort_keys=True, indent=1)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(payload + "\n", encoding="utf-8")
    _log(payload)
    _write_run_manifest(Path(args.out).with_suffix(".run.json"), "sweep-k", config,
                        {"table": args.out})
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import serve
    config = {"backbone": args.backbone, "lctn": args.lctn, "port": args.port,
              "host": args.host}
    _announce("serve", config)
    bundle, model = _load_models(args.backbone, args.lctn)
    serve(bundle, model, host=args.host, port=args.port, log=_log)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sketchdiff",
        description="Sketch-to-image translation on a frozen miniature latent "
                    "diffusion backbone.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic shape dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--force", action="store_true",
                   help="overwrite an existing dataset directory")
    g.set_defaults(fn=cmd_gen_data)

    tb = sub.add_parser("train-backbone", help="train autoencoder + denoiser, freeze")
    tb.add_argument("--data", required=True)
    tb.add_argument("--out", required=True, help="checkpoint path (.dsk)")
    tb.add_argument("--ae-steps", type=int, default=10000)
    tb.add_argument("--dn-steps", type=int, default=30000)
    tb.add_argument("--batch", type=int, default=16)
    tb.add_argument("--lr", type=float, default=1e-3)
    tb.add_argument("--channels", type=int, default=32)
    tb.add_argument("--T", type=int, default=100, help="diffusion steps")
    tb.add_argument("--seed", type=int, default=0)
    tb.set_defaults(fn=cmd_train_backbone)

    tl = sub.add_parser("train-lctn", help="train the latent code translator")
    tl.add_argument("--data", required=True)
    tl.add_argument("--backbone", required=True)
    tl.add_argument("--out", required=True)
    tl.add_argument("--iters", type=int, default=20000)
    tl.add_argument("--lr", type=float, default=1e-3)
    tl.add_argument("--warmup", type=int, default=100)
    tl.add_argument("--batch", type=int, default=4)
    tl.add_argument("--seed", type=int, default=0)
    tl.set_defaults(fn=cmd_train_lctn)

    s = sub.add_parser("sample", help="translate one sketch to an image")
    s.add_argument("--backbone", required=True)
    s.add_argument("--lctn", required=True)
    s.add_argument("--sketch", required=True, help="input PGM file")
    s.add_argument("--class", required=True, help="class name or id")
    s.add_argument("--style", default=None, help="style name (optional)")
    s.add_argument("--k", type=float, default=0.8, help="k ratio in (0,1)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=["aligned", "paper-literal"], default="aligned")
    s.add_argument("--out", required=True, help="output PPM file")
    s.add_argument("--also-direct", action="store_true",
                   help="also write the no-diffusion direct decode")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="metric report over the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--backbone", required=True)
    e.add_argument("--lctn", required=True)
    e.add_argument("--k", type=float, default=0.8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--limit", type=int, default=None, help="cap evaluated items")
    e.add_argument("--out", required=True, help="report JSON path")
    e.set_defaults(fn=cmd_eval)

    w = sub.add_parser("sweep-k", help="structure/realism trade-off table")
    w.add_argument("--data", required=True)
    w.add_argument("--backbone", required=True)
    w.add_argument("--lctn", required=True)
    w.add_argument("--from", type=float, default=0.5)
    w.add_argument("--to", type=float, default=0.95)
    w.add_argument("--points", type=int, default=10)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--limit", type=int, default=50)
    w.add_argument("--out", required=True)
    w.set_defaults(fn=cmd_sweep_k)

    v = sub.add_parser("serve", help="HTTP API for the sketchpad UI")
    v.add_argument("--backbone", required=True)
    v.add_argument("--lctn", required=True)
    v.add_argument("--port", type=int, default=8080)
    v.add_argument("--host", default="127.0.0.1")
    v.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.fn(args)
    except DataError as e:
        _log(f"data error: {e}")
        return EXIT_DATA
    except ModelError as e:
        _log(f"model error: {e}")
        return EXIT_MODEL
    except DivergenceError as e:
        _log(f"divergence: {e}")
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
