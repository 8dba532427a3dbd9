"""End-to-end orchestration: render -> pretrain -> few-shot runs -> report."""
import logging
from pathlib import Path

from .evalkit import report
from .plotting import loss_figure, report_figure
from .trainer import FewShotProtocol, evaluate, finetune, infer, pretrain

log = logging.getLogger(__name__)


def fewshot_runs(dataset, cfg, out_dir, init=None, v=None, seeds=None, split="test"):
    """Fine-tune, infer and evaluate once per seed; returns the list of mIoU values."""
    v = cfg.v if v is None else v
    seeds = cfg.seeds if seeds is None else seeds
    out = Path(out_dir)
    scores = []
    for seed in seeds:
        proto = FewShotProtocol(cfg.k, v if v == "all" else int(v), seed)
        run = out / f"seed_{seed}"
        finetune(dataset, cfg, proto, run, init=init)
        loss_figure(run / "loss.csv")
        infer(dataset, cfg, run / "finetune.ckpt", run / "pred", split=split)
        miou, _ = evaluate(dataset, run / "pred", split)
        log.info("%s seed %d: mIoU %.4f", out.name, seed, miou)
        scores.append(miou)
    return scores


def run_pipeline(dataset, cfg, out_dir, threads=1, scratch=True, v_values=None):
    """Full protocol on one dataset. Writes ``report.csv`` and ``report.png`` under ``out_dir``.

    Categories are named ``<init>_k<k>_v<v>`` with init in {pretrained, scratch}.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset.render(cfg, threads=threads)
    pretrain(dataset, cfg, out / "pretrain")
    loss_figure(out / "pretrain" / "loss.csv")
    init = out / "pretrain" / "embed.ckpt"
    runs = {}
    for v in (v_values or [cfg.v]):
        inits = [("pretrained", init)] + ([("scratch", None)] if scratch else [])
        for tag, ck in inits:
            name = f"{tag}_k{cfg.k}_v{v}"
            runs[name] = fewshot_runs(dataset, cfg, out / name, init=ck, v=v)
    report(runs, out / "report.csv")
    report_figure(runs, out / "report.png")
    return runs
