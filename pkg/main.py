"""
MeanFlowSE 主入口文件
命令行运行语料生成、训练、增强、验证与基准
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from meanflowse.errors import ConfigError
from meanflowse.models import RunConfig, VerifyReport
from meanflowse.pipeline import (
    default_checkpoint,
    enhance_file,
    generate_corpus,
    run_bench,
    train_model,
    verify,
)

# 加载环境变量
load_dotenv()

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2


def print_banner():
    """打印程序横幅"""
    banner = """
╔══════════════════════════════════════════════════════════════╗
║                        MeanFlowSE                            ║
║           平均速度流 · 单步 / 少步 STFT 语音增强              ║
║                          v0.1.0                              ║
╚══════════════════════════════════════════════════════════════╝
"""
    print(banner)


def print_report(report: VerifyReport):
    """打印验证报告"""
    print("\n" + "=" * 60)
    print("🧪 解析预言机验证报告" + ("（quick）" if report.quick else ""))
    if report.mutation:
        print(f"⚠️  变异模式: {report.mutation}")
    print("=" * 60)
    for check in report.checks:
        mark = "✅" if check.passed else "❌"
        print(f"  {mark} {check.name:<24} {check.value:.3e}  (阈值 {check.threshold:g}, {check.seconds:.2f}s)")
        if check.detail:
            print(f"      {check.detail}")
    print("-" * 40)
    print(f"  结论: {'全部通过' if report.passed else '存在失败项'}")
    print("=" * 60)


def _resolve(workdir: Path, path: Optional[str]) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else workdir / p


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML 配置文件路径")
    common.add_argument("--workdir", default=".", help="所有输入输出的根目录（默认当前目录）")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="覆盖配置项，可重复，如 --set train.steps=100",
    )
    common.add_argument("--force", action="store_true", help="覆盖已存在的输出")

    parser = argparse.ArgumentParser(description="MeanFlowSE - 平均速度流语音增强")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-corpus", parents=[common], help="生成合成语料与清单")

    train = sub.add_parser("train", parents=[common], help="训练平均速度场")
    train.add_argument("--resume", help="从该检查点续训")

    enh = sub.add_parser("enhance", parents=[common], help="增强单个 WAV 文件")
    enh.add_argument("--checkpoint", help="检查点路径（默认 train/checkpoints/final.mfnn）")
    enh.add_argument("--input", required=True, help="带噪 WAV 路径")
    enh.add_argument("--output", help="输出 WAV 路径（默认 enhanced/<名称>_enhanced.wav）")
    enh.add_argument("--mode", choices=["mf", "euler"], help="mf: 位移采样；euler: 欧拉基线")
    enh.add_argument("--nfe", type=int, help="网络前向次数")
    enh.add_argument("--use-raw", action="store_true", help="使用原始权重而非 EMA 权重")

    ver = sub.add_parser("verify", parents=[common], help="运行解析预言机检查集")
    ver.add_argument("--quick", action="store_true", help="只运行亚秒级子集")
    ver.add_argument("--mutation", choices=["sign"], help=argparse.SUPPRESS)

    bench = sub.add_parser("bench", parents=[common], help="NFE / RTF 基准")
    bench.add_argument("--checkpoint", help="检查点路径（默认 train/checkpoints/final.mfnn）")
    bench.add_argument("--use-raw", action="store_true", help="使用原始权重而非 EMA 权重")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=os.getenv("MFSE_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    print_banner()

    workdir = Path(args.workdir)
    try:
        config = RunConfig.load(_resolve(workdir, args.config), args.overrides)
        if args.command == "enhance":
            if args.mode is not None:
                config.sampler.mode = args.mode
            if args.nfe is not None:
                config.sampler.nfe = args.nfe
    except (ConfigError, ValueError) as e:
        print(f"❌ 配置错误: {e}")
        return EXIT_USAGE

    if args.command == "gen-corpus":
        print("\n🎛️  生成合成语料...")
        result = generate_corpus(config, workdir, force=args.force)
        if result["success"]:
            print(f"\n✅ 语料已生成: {result['manifest']}")
            print(f"  划分:       {result['counts']}")
            print(f"  SNR 最大偏差: {result['max_snr_error_db']} dB")

    elif args.command == "train":
        print(f"\n🏋️  训练 {config.train.steps} 步...")
        result = train_model(config, workdir, resume=_resolve(workdir, args.resume))
        if result["success"]:
            print("\n✅ 训练完成:")
            print(f"  步数:     {result['steps']}")
            print(f"  最终损失: {result['final_loss']}")
            print(f"  检查点:   {result['checkpoint']}")
            print(f"  日志:     {result['log']}")

    elif args.command == "enhance":
        source = _resolve(workdir, args.input)
        output = _resolve(workdir, args.output) or workdir / "enhanced" / f"{source.stem}_enhanced.wav"
        checkpoint = _resolve(workdir, args.checkpoint) or default_checkpoint(workdir)
        print(f"\n🔊 增强 {source} (mode={config.sampler.mode}, NFE={config.sampler.nfe})...")
        result = enhance_file(config, checkpoint, source, output, use_raw=args.use_raw)
        if result["success"]:
            record = result["record"]
            print(f"\n✅ 输出: {result['output']}")
            print(f"  NFE:  {record.nfe}")
            print(f"  RTF:  {record.rtf:.4f}")
            print(f"  记录: {result['report']}")

    elif args.command == "verify":
        result = verify(config, workdir, quick=args.quick, mutation=args.mutation)
        if result["success"]:
            print_report(result["report"])
            return EXIT_OK if result["passed"] else EXIT_VERIFY_FAILED

    elif args.command == "bench":
        checkpoint = _resolve(workdir, args.checkpoint) or default_checkpoint(workdir)
        print("\n📈 运行 NFE / RTF 基准...")
        result = run_bench(config, workdir, checkpoint, use_raw=args.use_raw)
        if result["success"]:
            print("\n" + result["table"])
            if not result["rtf_monotone"]:
                print("\n⚠️  RTF 未随 NFE 单调增加")
            print(f"\n  JSON: {result['json']}")
            print(f"  文本: {result['txt']}")

    else:
        parser.print_help()
        return EXIT_USAGE

    if not result["success"]:
        print(f"❌ {result['error']}")
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
