"""Command line interface: `mftools <command> [options]`.

Exit codes: 0 success, 1 argument error, 2 I/O error, 3 validation failure.
"""
from pathlib import Path
import argparse
import logging
import os
import sys

from . import __version__
from .utils import DocumentError, ValidationError, load_yaml, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ARGUMENT = 1
EXIT_IO = 2
EXIT_VALIDATION = 3

COMMANDS = ("simulate", "gen-dataset", "fuse", "evaluate", "grad-check", "validate")


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with code 1 (argparse uses 2, which is reserved
    for I/O errors here)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGUMENT, f"{self.prog}: error: {message}\n")


def _progress(options) -> bool:
    return not options.quiet and sys.stderr.isatty()


def _seed(options) -> int:
    return 0 if options.seed is None else int(options.seed)


def run_simulate(options):
    from .defocus import (BoundaryLineScene, load_scene, make_three_object_scene, plot_layers, render_layers,
                          render_one_param_regions, render_two_param, render_two_param_regions)
    from .image import add_noise, save_png
    from .utils import derive_rng

    if (options.three_objects is None) == (options.scene is None):
        raise ValueError("Give either a scene file or --three-objects N")

    if options.three_objects is not None:
        scene = make_three_object_scene(options.three_objects, sigma_near=options.sigma_near, sigma_far=options.sigma_far,
                                size=options.size, all_in_focus=options.all_in_focus)
        name = f"three_objects_focus{options.three_objects}"
    else:
        scene = load_scene(options.scene)
        name = Path(options.scene).stem

    out = Path(options.out)
    model = options.model
    stack = None
    if isinstance(scene, BoundaryLineScene):
        if model != "two":
            raise ValueError("A boundary scene can only be rendered with --model two")
        image = render_two_param(scene)
    elif model == "one":
        image = render_one_param_regions(scene)
    elif model == "two":
        image = render_two_param_regions(scene)
    else:
        stack = render_layers(scene, threads=options.threads)
        image = stack.image

    if options.noise:
        image = add_noise(image, options.noise, derive_rng(_seed(options), "simulate", 0))

    fn = out / f"{name}_{model}.png"
    save_png(image, fn, bit_depth=16)
    print(f"Wrote {model} render to file {fn}")

    if options.all_layers or options.plot:
        if stack is None:
            raise ValueError("--all-layers and --plot need --model matte on a layered scene")
        if options.all_layers:
            for n, products in enumerate(zip(stack.surfaces, stack.mattes0, stack.mattes, stack.layer_images), start=1):
                for label, img in zip(("S", "alpha0", "alpha", "I"), products):
                    save_png(img, out / f"{name}_layer{n}_{label}.png", bit_depth=16)
            print(f"Wrote {4 * len(stack.mattes)} layer images to directory {out}")
        if options.plot:
            plot_fn = out / f"{name}_layers.png"
            plot_layers(scene, stack, plot_fn)
            print(f"Wrote layer panel to file {plot_fn}")
    return EXIT_OK


def run_gen_dataset(options):
    from .dataset import GenConfig, catalog_config, expected_pairs, generate_dataset, load_catalog, verify_dataset

    catalog = load_catalog(options.catalog)
    settings = catalog_config(options.catalog)
    flags = {
        "out_size": options.size,
        "backgrounds_per_fg": options.backgrounds_per_fg,
        "swap_probability": options.swap_probability,
        "seed": options.seed,
        "noise": options.noise,
    }
    settings.update({k: v for k, v in flags.items() if v is not None})
    if options.sigma_min is not None or options.sigma_max is not None:
        lo, hi = settings.get("sigma_range", GenConfig.sigma_range)
        settings["sigma_range"] = (options.sigma_min if options.sigma_min is not None else lo,
                                   options.sigma_max if options.sigma_max is not None else hi)
    if options.independent_sigma:
        settings["independent_sigma"] = True
    cfg = GenConfig.from_dict(settings)

    print(f"{len(catalog.foregrounds)} foregrounds x {cfg.backgrounds_per_fg} backgrounds "
          f"-> {expected_pairs(catalog, cfg)} pairs")
    if options.dry_run:
        from .dataset import plan_dataset
        plans = plan_dataset(catalog, cfg)
        print(f"Planned {len(plans)} pairs (dry run, nothing written)")
        return EXIT_OK

    manifest = generate_dataset(catalog, cfg, options.out, threads=options.threads, progress=_progress(options))
    print(f"Wrote {manifest['n_pairs']} pairs to directory {options.out}")
    for error in manifest["errors"]:
        print(f"  failed: {error['id']}: {error['error']}")

    if options.verify:
        n = verify_dataset(options.out, threads=options.threads, progress=_progress(options))
        print(f"Verified {n} pairs")
    return EXIT_OK if not manifest["errors"] else EXIT_IO


def run_fuse(options):
    from .fusion import CorrectionSource, fuse_dataset, fuse_pair
    from .image import load_png

    if options.pairs:
        if options.a or options.b or options.gmap or options.corr or options.oracle_gt:
            raise ValueError("--pairs cannot be combined with --a/--b/--gmap/--corr/--oracle-gt")
        result = fuse_dataset(options.pairs, options.out, oracle=options.oracle,
                              threads=options.threads, progress=_progress(options))
        print(f"Wrote {len(result['written'])} fused images to directory {options.out}")
        for error in result["errors"]:
            print(f"  failed: {error['id']}: {error['error']}")
        return EXIT_OK if not result["errors"] else EXIT_IO

    if not options.a or not options.b:
        raise ValueError("--a and --b are required (or --pairs DIR)")
    if options.oracle:
        raise ValueError("--oracle applies to --pairs; use --oracle-gt GT.png for a single pair")

    if options.corr:
        corr = CorrectionSource.from_file(options.corr)
    elif options.oracle_gt:
        corr = CorrectionSource.oracle(load_png(options.oracle_gt))
    else:
        corr = CorrectionSource.zero()

    _, report = fuse_pair(options.a, options.b, options.out, gmap_fn=options.gmap, corr=corr,
                          gmap_out=options.gmap_out, metrics_fn=options.metrics,
                          intensity_scale=options.intensity_scale,
                          window=options.window, band_radius=options.band_radius,
                          majority_radius=options.majority_radius)
    print(f"Wrote fused image to file {options.out}")
    if report is not None:
        from .metrics import format_table
        print(format_table(report))
        print(f"Wrote metrics to file {options.metrics}")
    return EXIT_OK


def _parse_methods(entries):
    methods = {}
    for entry in entries or []:
        label, sep, path = entry.partition("=")
        if not sep or not label or not path:
            raise ValueError(f"--methods expects label=dir, got {entry!r}")
        if label in methods:
            raise ValueError(f"Duplicate method label: {label}")
        methods[label] = path
    return methods


def run_evaluate(options):
    from .metrics import evaluate_batch, format_summary, format_table

    methods = {}
    if options.inputs:
        methods["input"] = options.inputs
    methods.update(_parse_methods(options.methods))
    if not methods:
        raise ValueError("Nothing to evaluate: give --inputs and/or --methods")

    report = evaluate_batch(methods, intensity_scale=options.intensity_scale,
                            threads=options.threads, progress=_progress(options))
    print(format_table(report))
    print()
    print(format_summary(report))
    for error in report.errors:
        print(f"  unreadable: {error['path']}: {error['error']}")

    if options.out:
        report.write(options.out)
        print(f"Wrote {len(report.rows)} rows to file {options.out}")
    if options.xlsx:
        report.write(options.xlsx)
        print(f"Wrote {len(report.rows)} rows to file {options.xlsx}")
    return EXIT_OK if report.ok else EXIT_IO


def run_grad_check(options):
    from .losses import LossConfig, grad_check

    cfg = LossConfig(lambda1=options.lambda1, lambda2=options.lambda2, k=options.k,
                     weight_matte=options.weight_matte)
    result = grad_check(size=options.size, seed=_seed(options), cfg=cfg, h=options.step)
    print(result)
    if result.max_error >= options.tolerance:
        raise ValidationError(f"gradient check failed: max relative error {result.max_error:.3e} "
                              f">= {options.tolerance:g}")
    print(f"max relative error {result.max_error:.3e} < {options.tolerance:g}")
    return EXIT_OK


def run_validate(options):
    from .dataset import verify_dataset
    from .guidance import load_guidance, validate_guidance

    for target in options.targets:
        target = Path(target)
        if target.is_dir():
            n = verify_dataset(target, threads=options.threads, progress=_progress(options))
            print(f"{target}: {n} pairs verified")
        else:
            report = validate_guidance(load_guidance(target), band_radius=options.band_radius)
            print(f"{target}: valid")
            print(report)
    return EXIT_OK


def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed",
                        action="store", type=int, dest="seed",
                        help="Seed for all random draws (default: 0)")
    common.add_argument("-t", "--threads",
                        action="store", type=int, dest="threads",
                        help="Number of worker threads (default: number of CPUs)")
    common.add_argument("-v", "--verbose",
                        action="count", dest="verbose",
                        help="Log more (-v: info, -vv: debug)")
    common.add_argument("-q", "--quiet",
                        action="store_true", dest="quiet",
                        help="Hide progress bars")
    common.add_argument("--config",
                        action="store", type=str, dest="config", metavar="FILE",
                        help="YAML file with option defaults (keys are option names, "
                        "optionally grouped per command); command line flags take precedence")
    common.set_defaults(seed=None, threads=os.cpu_count() or 1, verbose=0, quiet=False, config=None)
    return common


def _estimator_arguments(parser):
    parser.add_argument("--window",
                        action="store", type=int, dest="window",
                        help="Focus measure window in pixels (default: %(default)s)")
    parser.add_argument("--band-radius",
                        action="store", type=float, dest="band_radius",
                        help="Half width of the boundary band in pixels (default: %(default)s)")
    parser.add_argument("--majority-radius",
                        action="store", type=int, dest="majority_radius",
                        help="Radius of the majority filter (default: %(default)s)")
    parser.set_defaults(window=9, band_radius=6.0, majority_radius=7)


def build_parser():
    description = """Multi-focus fusion tools: defocus simulation with the layered alpha-matte model,
synthetic training pair generation, guidance-map fusion, losses and quality metrics.

Commands:
  simulate      render a layered or boundary scene with one of the defocus models
  gen-dataset   generate synthetic multi-focus pairs from foreground/background assets
  fuse          fuse a source pair (or a generated dataset) with a guidance map
  evaluate      no-reference metrics (AG, LIF, MSD, GLD) for one or more methods
  grad-check    check the analytic loss gradients against finite differences
  validate      check guidance map files or a generated dataset
"""
    parser = ArgumentParser(prog="mftools", description=description,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _common_parser()
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    subparsers.required = True
    parser.commands = subparsers.choices

    # simulate
    p = subparsers.add_parser("simulate", parents=[common], help="Render a defocused scene",
                              formatter_class=argparse.RawDescriptionHelpFormatter,
                              description="Render a scene with the one-parameter, two-parameter or alpha-matte "
                              "defocus model.\n\nScene files are YAML documents (kind: layers | boundary).")
    p.add_argument("scene",
                   type=str, nargs="?", metavar="SCENE",
                   help="YAML scene description")
    p.add_argument("--three-objects", "--fig7",
                   action="store", type=int, dest="three_objects", choices=(1, 2, 3), metavar="N",
                   help="Use the built-in three-object scene focused on object N instead of a scene file")
    p.add_argument("-m", "--model",
                   action="store", type=str, dest="model", choices=("one", "two", "matte"),
                   help="Defocus model (default: %(default)s)")
    p.add_argument("-o", "--out",
                   action="store", type=str, dest="out",
                   help="Output directory (default: %(default)s)")
    p.add_argument("--all-layers",
                   action="store_true", dest="all_layers",
                   help="Also write S_n, alpha0_n, alpha_n and I_n for every layer (matte model)")
    p.add_argument("--plot",
                   action="store_true", dest="plot",
                   help="Write a panel of all layer products (matte model)")
    p.add_argument("--all-in-focus",
                   action="store_true", dest="all_in_focus",
                   help="Render the built-in scene with every layer sharp")
    p.add_argument("--sigma-near",
                   action="store", type=float, dest="sigma_near",
                   help="Blur of layers in front of the focused object (default: %(default)s)")
    p.add_argument("--sigma-far",
                   action="store", type=float, dest="sigma_far",
                   help="Blur of layers behind the focused object (default: %(default)s)")
    p.add_argument("--size",
                   action="store", type=int, dest="size",
                   help="Size of the built-in scene in pixels (default: %(default)s)")
    p.add_argument("--noise",
                   action="store", type=float, dest="noise",
                   help="Standard deviation of additive Gaussian noise")
    p.set_defaults(func=run_simulate, three_objects=None, model="matte", out="simulate", sigma_near=4.0,
                   sigma_far=2.0, size=256, noise=None)

    # gen-dataset
    p = subparsers.add_parser("gen-dataset", parents=[common], help="Generate synthetic training pairs",
                              formatter_class=argparse.RawDescriptionHelpFormatter,
                              description="Generate multi-focus pairs with ground truth and guidance maps.\n\n"
                              "Output: OUT/pairs/<id>/{a,b,gt,matte,matte_blur,gmap}.png and OUT/manifest.yaml")
    p.add_argument("-c", "--catalog",
                   action="store", type=str, dest="catalog", required=True,
                   help="YAML asset catalog (foregrounds with mattes, backgrounds)")
    p.add_argument("-o", "--out",
                   action="store", type=str, dest="out",
                   help="Output directory (default: %(default)s)")
    p.add_argument("--size",
                   action="store", type=int, dest="size",
                   help="Output size in pixels (default: 512)")
    p.add_argument("--backgrounds-per-fg",
                   action="store", type=int, dest="backgrounds_per_fg",
                   help="Backgrounds drawn per foreground (default: 20)")
    p.add_argument("--sigma-min",
                   action="store", type=float, dest="sigma_min",
                   help="Smallest defocus sigma (default: 1)")
    p.add_argument("--sigma-max",
                   action="store", type=float, dest="sigma_max",
                   help="Largest defocus sigma (default: 5)")
    p.add_argument("--swap-probability",
                   action="store", type=float, dest="swap_probability",
                   help="Probability that the in-focus foreground is image B (default: 0.5)")
    p.add_argument("--noise",
                   action="store", type=float, dest="noise",
                   help="Standard deviation of additive noise on the source images")
    p.add_argument("--independent-sigma",
                   action="store_true", dest="independent_sigma",
                   help="Draw the background sigma independently of the foreground sigma")
    p.add_argument("--verify",
                   action="store_true", dest="verify",
                   help="Re-derive every pair after writing and check the stored files")
    p.add_argument("--dry-run",
                   action="store_true", dest="dry_run",
                   help="Validate the configuration and plan the pairs without writing anything")
    p.set_defaults(func=run_gen_dataset, out="dataset", size=None, backgrounds_per_fg=None, sigma_min=None,
                   sigma_max=None, swap_probability=None, noise=None)

    # fuse
    p = subparsers.add_parser("fuse", parents=[common], help="Fuse a source pair",
                              formatter_class=argparse.RawDescriptionHelpFormatter,
                              description="Guidance-map fusion with optional boundary correction.\n\n"
                              "Without --gmap the guidance map is estimated from the sources.")
    p.add_argument("--a",
                   action="store", type=str, dest="a",
                   help="Source image A")
    p.add_argument("--b",
                   action="store", type=str, dest="b",
                   help="Source image B")
    p.add_argument("--gmap",
                   action="store", type=str, dest="gmap",
                   help="Guidance map PNG (levels 0/128/255)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--corr",
                       action="store", type=str, dest="corr",
                       help="Correction PNG (16 bit, value = C/2 + 0.5)")
    group.add_argument("--oracle-gt",
                       action="store", type=str, dest="oracle_gt",
                       help="Ground truth; uses the exact correction GT - Fusion_Ini")
    p.add_argument("-o", "--out",
                   action="store", type=str, dest="out", required=True,
                   help="Output PNG (or directory with --pairs)")
    p.add_argument("--gmap-out",
                   action="store", type=str, dest="gmap_out",
                   help="Also write the guidance map used")
    p.add_argument("--metrics",
                   action="store", type=str, dest="metrics",
                   help="Write metrics of the fused image to this report (.yaml, .csv or .xlsx)")
    p.add_argument("--intensity-scale",
                   action="store", type=float, dest="intensity_scale",
                   help="Intensity unit for the metrics, e.g. 255 (default: %(default)s)")
    p.add_argument("--pairs",
                   action="store", type=str, dest="pairs",
                   help="Fuse every pair of a generated dataset directory")
    p.add_argument("--oracle",
                   action="store_true", dest="oracle",
                   help="With --pairs: use the oracle correction from each pair's ground truth")
    _estimator_arguments(p)
    p.set_defaults(func=run_fuse, a=None, b=None, gmap=None, corr=None, oracle_gt=None, gmap_out=None,
                   metrics=None, intensity_scale=1.0, pairs=None)

    # evaluate
    p = subparsers.add_parser("evaluate", parents=[common], help="Compute quality metrics",
                              formatter_class=argparse.RawDescriptionHelpFormatter,
                              description="Average gradient (AG), linear index of fuzziness (LIF), mean "
                              "standard deviation (MSD) and gray level difference (GLD).\n\n"
                              "With several methods each cell reads `mean (wins)`; * marks the best mean.")
    p.add_argument("-i", "--inputs",
                   action="store", type=str, dest="inputs", nargs="+", metavar="PATH",
                   help="Images, directories or globs evaluated under the label 'input'")
    p.add_argument("-m", "--methods",
                   action="store", type=str, dest="methods", nargs="+", metavar="LABEL=DIR",
                   help="Labelled result directories to compare; images are matched by file name")
    p.add_argument("-o", "--out",
                   action="store", type=str, dest="out",
                   help="Report file (.yaml, .csv or .xlsx)")
    p.add_argument("--xlsx",
                   action="store", type=str, dest="xlsx",
                   help="Additional Excel report")
    p.add_argument("--intensity-scale",
                   action="store", type=float, dest="intensity_scale",
                   help="Intensity unit, e.g. 255 for 8-bit conventions (default: %(default)s)")
    p.set_defaults(func=run_evaluate, inputs=None, methods=None, out=None, xlsx=None, intensity_scale=1.0)

    # grad-check
    p = subparsers.add_parser("grad-check", parents=[common], help="Finite-difference check of the losses",
                              formatter_class=argparse.RawDescriptionHelpFormatter,
                              description="Evaluate the combined loss on random inputs and compare the "
                              "analytic gradients with central differences.")
    p.add_argument("--size",
                   action="store", type=int, dest="size",
                   help="Image size in pixels (default: %(default)s)")
    p.add_argument("--lambda1",
                   action="store", type=float, dest="lambda1",
                   help="Weight of the matte loss (default: %(default)s)")
    p.add_argument("--lambda2",
                   action="store", type=float, dest="lambda2",
                   help="Weight of the initial fusion loss (default: %(default)s)")
    p.add_argument("-k",
                   action="store", type=float, dest="k",
                   help="Boundary weight contrast (default: %(default)s)")
    p.add_argument("--weight-matte",
                   action="store", type=str, dest="weight_matte", choices=("ini", "gt"),
                   help="Matte used for the boundary weight (default: %(default)s)")
    p.add_argument("--step",
                   action="store", type=float, dest="step",
                   help="Finite difference step (default: %(default)s)")
    p.add_argument("--tolerance",
                   action="store", type=float, dest="tolerance",
                   help="Largest accepted relative error (default: %(default)s)")
    p.set_defaults(func=run_grad_check, size=6, lambda1=0.2, lambda2=0.2, k=5.0, weight_matte="ini",
                   step=1e-4, tolerance=1e-4)

    # validate
    p = subparsers.add_parser("validate", parents=[common], help="Validate guidance maps or a dataset",
                              formatter_class=argparse.RawDescriptionHelpFormatter,
                              description="Guidance map PNGs must only hold the levels 0, 128 and 255 (+-2).\n"
                              "Directories are treated as generated datasets and re-derived pair by pair.")
    p.add_argument("targets",
                   type=str, nargs="+", metavar="PATH",
                   help="Guidance map PNG files or dataset directories")
    p.add_argument("--band-radius",
                   action="store", type=float, dest="band_radius",
                   help="Band radius used for the band consistency report (default: %(default)s)")
    p.set_defaults(func=run_validate, band_radius=6.0)

    return parser


def _config_defaults(fn, command):
    doc = load_yaml(fn)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise DocumentError("config must be a mapping", path=fn, line=1)
    defaults = {}
    for key, value in doc.items():
        if key in COMMANDS:
            continue
        defaults[key.replace("-", "_")] = value
    section = doc.get(command)
    if isinstance(section, dict):
        defaults.update({key.replace("-", "_"): value for key, value in section.items()})
    return defaults


def _apply_config(parser, argv):
    """Load --config (if any) into the defaults of the selected command."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", dest="config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    command = next((arg for arg in rest if arg in COMMANDS), None)
    if command is None:
        return
    defaults = _config_defaults(known.config, command)
    parser.commands[command].set_defaults(**defaults)
    logger.debug("Defaults from %s: %s", known.config, defaults)


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()

    try:
        _apply_config(parser, argv)
        options = parser.parse_args(argv)
        setup_logging(options.verbose)
        return options.func(options) or EXIT_OK
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_ARGUMENT
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARGUMENT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
