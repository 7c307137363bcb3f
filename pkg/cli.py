"""
命令行入口
python cli.py {voxelize,train,infer,eval,selfcheck,bench} ...
"""

import os
import sys
import json
import hashlib
import logging
import argparse
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config import PipelineConfig, SupportedOptions, load_config
from env_manager import get_env_manager
from errors import ConfigError, VoxelPipeError
from monitor import StageMonitor

logger = logging.getLogger("voxelpipe")

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(paths: Sequence[Optional[str]]) -> str:
    """
    输入文件的内容哈希：每个文件按 git blob 方式求 SHA-1，再对 (相对路径, 哈希) 列表整体求 SHA-1；
    目录递归展开，路径取相对目录的部分，因此与目录所在位置无关
    """
    entries = []
    for path in paths:
        if not path:
            continue
        if os.path.isdir(path):
            for root, _, files in os.walk(path):
                for name in files:
                    full = os.path.join(root, name)
                    rel = os.path.relpath(full, path).replace(os.sep, "/")
                    with open(full, "rb") as f:
                        entries.append(f"{os.path.basename(os.path.normpath(path))}/{rel} {_git_blob_sha1(f.read())}")
        elif os.path.isfile(path):
            with open(path, "rb") as f:
                entries.append(f"{os.path.basename(path)} {_git_blob_sha1(f.read())}")
        else:
            entries.append(f"{path} <virtual>")
    return hashlib.sha1("\n".join(sorted(entries)).encode("utf-8")).hexdigest()


@dataclass
class RunManifest:
    """一次命令的可复现记录"""

    command: str
    config: Dict[str, Any]
    seed: int
    input_hash: str
    timings: Dict[str, float] = field(default_factory=dict)
    outputs: Dict[str, Any] = field(default_factory=dict)

    def write(self, out_dir: Optional[str]) -> None:
        payload = json.dumps(asdict(self), ensure_ascii=False, indent=2, sort_keys=True)
        if not out_dir:
            logger.info(f"运行清单: {payload}")
            return
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write(payload + "\n")
        logger.info(f"运行清单已写入 {path}")


def setup_logging(verbose: bool) -> None:
    level_name = "DEBUG" if verbose else get_env_manager().log_level
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stderr)],
    )


def resolve_config(args) -> PipelineConfig:
    config = load_config(args.config, getattr(args, "cls", None))
    return get_env_manager().apply_overrides(config)


def _calibration(path: Optional[str], config: PipelineConfig):
    from io_kitti import Calibration, parse_calibration

    if path:
        return parse_calibration(path, tuple(config.io.image_size))
    return Calibration.default(tuple(config.io.image_size))


# ---- 子命令 ----

def cmd_voxelize(args, config: PipelineConfig, timer: StageMonitor) -> Dict[str, Any]:
    from io_kitti import crop_to_range, filter_by_image_frustum, load_pointcloud
    from voxel_pipeline import augment_with_centroid, build_buffers, dump_buffers

    with timer.stage("load"):
        cloud = load_pointcloud(args.cloud)
        if args.frustum_filter or config.io.frustum_filter:
            cloud = filter_by_image_frustum(cloud, _calibration(args.calib, config))
        cloud = crop_to_range(cloud, config.voxel.range)
    with timer.stage("buffer_build"):
        buffers = augment_with_centroid(build_buffers(cloud, config.voxel))
    stats = buffers.stats.as_dict()
    if args.stats:
        for key, value in stats.items():
            print(f"{key}: {value}")
    if args.dump:
        dump_buffers(buffers, args.dump)
    return {"stats": stats, "dump": args.dump}


def cmd_train(args, config: PipelineConfig, timer: StageMonitor, threads: int) -> Dict[str, Any]:
    from trainer import open_dataset, train

    with timer.stage("load"):
        dataset = open_dataset(args.data or get_env_manager().data_dir or "synthetic:4", config)
    with timer.stage("train"):
        result = train(config, dataset, out_dir=args.out, threads=threads, resume=args.resume,
                       max_steps=args.max_steps)
    if result.losses:
        print(f"步数 {result.steps}，初始损失 {result.losses[0]['loss']:.6f}，最终损失 {result.losses[-1]['loss']:.6f}")
    return {"steps": result.steps, "checkpoint": result.checkpoint, "skipped_frames": result.skipped_frames}


def _infer_frames(args, config: PipelineConfig):
    """返回 [(帧 id, 场景, 标定, 真值 LabelSet 或 None)]"""
    from augment import Scene
    from io_kitti import filter_by_image_frustum, load_labels, load_pointcloud
    from trainer import KittiDataset, open_dataset

    if args.cloud:
        calib = _calibration(args.calib, config)
        cloud = load_pointcloud(args.cloud)
        if args.frustum_filter or config.io.frustum_filter:
            cloud = filter_by_image_frustum(cloud, calib)
        labels = load_labels(args.labels, calib) if args.labels else None
        frame_id = os.path.splitext(os.path.basename(args.cloud))[0]
        yield frame_id, Scene(cloud=cloud, boxes=np.zeros((0, 7))), calib, labels
        return
    if not args.data:
        raise ConfigError("infer 需要 --cloud 或 --data")
    dataset = open_dataset(args.data, config)
    for index in range(len(dataset)):
        calib = dataset.calibration(index) if isinstance(dataset, KittiDataset) else _calibration(None, config)
        yield dataset.frame_id(index), dataset[index], calib, dataset.label_set(index)


def cmd_infer(args, config: PipelineConfig, timer: StageMonitor) -> Dict[str, Any]:
    from detector import VoxelNet
    from io_kitti import write_kitti_results
    from nn_kernels.checkpoint import load_checkpoint
    from postprocess_eval import export_ply
    from targets_loss import make_anchor_grid
    from trainer import MOMENTUM_PREFIX, infer_scene

    model = VoxelNet(config)
    state, _ = load_checkpoint(args.checkpoint)
    model.load_state_dict({k: v for k, v in state.items() if not k.startswith(MOMENTUM_PREFIX)})
    grid = make_anchor_grid(config.target, model.head_shape, config.voxel.range)
    result_dir = os.path.join(args.out, "data") if args.out else None
    if result_dir:
        os.makedirs(result_dir, exist_ok=True)
    total = 0
    for frame_id, scene, calib, labels in _infer_frames(args, config):
        with timer.stage("infer"):
            dets = infer_scene(model, grid, scene, config)
        total += len(dets)
        boxes = [d.box for d in dets]
        if result_dir:
            write_kitti_results(os.path.join(result_dir, f"{frame_id}.txt"), config.target.kitti_name,
                                boxes, [d.score for d in dets], calib)
        else:
            for d in dets:
                print(f"{frame_id} {d.cls} {d.score:.4f} " + " ".join(f"{v:.3f}" for v in d.box))
        if args.export_ply:
            os.makedirs(args.export_ply, exist_ok=True)
            gt_boxes = list(labels.boxes_of(config.target.kitti_name)) if labels is not None else []
            colors = [(0, 255, 0)] * len(boxes) + [(255, 0, 0)] * len(gt_boxes)
            export_ply(os.path.join(args.export_ply, f"{frame_id}.ply"), scene.cloud.points[:, :3],
                       boxes + gt_boxes, colors)
        logger.info(f"帧 {frame_id}: {len(dets)} 个检测")
    return {"detections": total, "results": result_dir}


def cmd_eval(args, config: PipelineConfig, timer: StageMonitor) -> Dict[str, Any]:
    from io_kitti import load_labels, read_kitti_results
    from postprocess_eval import ALL_DIFFICULTY, Detection, EvalConfig, average_precision

    if not args.results or not args.labels:
        raise ConfigError("eval 需要 --results 与 --labels 目录")
    frame_ids = sorted(os.path.splitext(n)[0] for n in os.listdir(args.labels) if n.endswith(".txt"))
    dets_per_frame, gts_per_frame = [], []
    with timer.stage("load"):
        for frame_id in frame_ids:
            calib_path = os.path.join(args.calib, f"{frame_id}.txt") if args.calib else None
            calib = _calibration(calib_path if calib_path and os.path.exists(calib_path) else None, config)
            gts_per_frame.append(load_labels(os.path.join(args.labels, f"{frame_id}.txt"), calib))
            result_path = os.path.join(args.results, f"{frame_id}.txt")
            dets = []
            if os.path.exists(result_path):
                found = read_kitti_results(result_path, calib)
                dets = [Detection(r.box, r.score if r.score is not None else 1.0, r.cls) for r in found.records]
            dets_per_frame.append(dets)
    eval_config = EvalConfig.from_settings(config.target, config.eval)
    difficulties = [ALL_DIFFICULTY] if args.difficulty == ALL_DIFFICULTY else None
    with timer.stage("eval"):
        report = average_precision(dets_per_frame, gts_per_frame, eval_config, difficulties)
    print(report.table())
    return {"ap": report.ap, "num_gt": report.num_gt, "frames": len(frame_ids)}


def cmd_selfcheck(args) -> Dict[str, Any]:
    from selfcheck import SUITES, run_selfcheck

    if args.filter and args.filter not in SUITES:
        raise ConfigError(f"未知的自检组 {args.filter}，可选 {sorted(SUITES)}")
    report = run_selfcheck(args.filter, full=args.full)
    print(report.table())
    return {"passed": report.passed, "failed": [r.name for r in report.results if not r.passed]}


def cmd_bench(args, config: PipelineConfig) -> Dict[str, Any]:
    from monitor import format_timing_table, run_bench

    summary = run_bench(config, repetitions=args.reps, num_points=args.points)
    print(format_timing_table(summary))
    return {"bench": summary}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxelpipe", description="VoxelNet 点云检测管线")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="扁平 key = value 配置文件")
    common.add_argument("--class", dest="cls", choices=SupportedOptions.PROFILES,
                        help="命名配置（car/pedestrian/cyclist/reduced）")
    common.add_argument("--threads", type=int, help="工作线程数上限")
    common.add_argument("--verbose", action="store_true", help="输出调试日志")
    common.add_argument("--out", help="输出目录")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", parents=[common], help="体素化单帧点云")
    p.add_argument("--cloud", required=True)
    p.add_argument("--calib")
    p.add_argument("--frustum-filter", action="store_true")
    p.add_argument("--stats", action="store_true")
    p.add_argument("--dump")

    p = sub.add_parser("train", parents=[common], help="训练")
    p.add_argument("--data", help="KITTI 目录或 synthetic:N，缺省取 VOXELPIPE_DATA_DIR，再缺省为 synthetic:4")
    p.add_argument("--resume", help="续训的权重文件")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("infer", parents=[common], help="推理并输出 KITTI 结果")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud")
    p.add_argument("--data")
    p.add_argument("--labels")
    p.add_argument("--calib")
    p.add_argument("--frustum-filter", action="store_true")
    p.add_argument("--export-ply")

    p = sub.add_parser("eval", parents=[common], help="计算 AP")
    p.add_argument("--results")
    p.add_argument("--labels")
    p.add_argument("--calib", help="标定文件目录，缺省使用默认标定")
    p.add_argument("--difficulty", choices=["kitti", "all"], default="kitti")

    p = sub.add_parser("selfcheck", parents=[common], help="运行自检")
    p.add_argument("--filter")
    p.add_argument("--full", action="store_true", help="在大规模随机数据上运行（耗时数分钟）")

    p = sub.add_parser("bench", parents=[common], help="分阶段计时")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--points", type=int)
    return parser


def run(args) -> int:
    timer = StageMonitor()
    if args.command == "selfcheck":
        outputs = cmd_selfcheck(args)
        config = resolve_config(args)
        inputs: List[Optional[str]] = [args.config]
    else:
        config = resolve_config(args)
        threads = get_env_manager().resolve_threads(args.threads)
        if args.command == "voxelize":
            outputs = cmd_voxelize(args, config, timer)
            inputs = [args.config, args.cloud, args.calib]
        elif args.command == "train":
            outputs = cmd_train(args, config, timer, threads)
            inputs = [args.config, args.data, args.resume]
        elif args.command == "infer":
            outputs = cmd_infer(args, config, timer)
            inputs = [args.config, args.checkpoint, args.cloud, args.data, args.labels, args.calib]
        elif args.command == "eval":
            outputs = cmd_eval(args, config, timer)
            inputs = [args.config, args.results, args.labels, args.calib]
        else:
            outputs = cmd_bench(args, config)
            inputs = [args.config]
    manifest = RunManifest(command=args.command, config=config.snapshot(), seed=config.seed,
                           input_hash=content_hash(inputs), timings=timer.totals(), outputs=outputs)
    manifest.write(args.out)
    if args.command == "selfcheck" and not outputs["passed"]:
        return EXIT_INVARIANT
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    setup_logging(args.verbose)
    try:
        return run(args)
    except VoxelPipeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O 错误: {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
