"""Named model presets.

Full-scale presets reproduce published architecture families for accounting
(parameter and FLOP) purposes; toy presets are <= 2M-parameter counterparts
of each family, sized for the synthetic video tasks.

Each full-scale preset carries reference complexity figures under a stated
convention: `eval_views` is the number of spatiotemporal views whose cost the
reference figure includes (1 = single clip), and reference FLOPs follow the
common usage of reporting multiply-accumulates in "GFLOPs".
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .models import ModelConfig, StageSpec, llgg_transform


@dataclass(frozen=True)
class PresetInfo:
    config: ModelConfig
    target_params_m: float | None = None
    target_gflops: float | None = None
    eval_views: int = 1


def _win(depth, dim, heads, window, merge_after=False):
    return StageSpec(depth=depth, dim=dim, heads=heads,
                     attention_kind="ShiftedLocalWindow", window=window,
                     merge_after=merge_after)


def _vst(name, dims, depths, heads):
    return ModelConfig(
        name=name, patch_size=(2, 4, 4), in_channels=3, num_classes=400,
        input_size=(32, 224, 224), positional_embedding="relative",
        stages=tuple(
            _win(depths[i], dims[i], heads[i], (8, 7, 7), merge_after=(i < 3))
            for i in range(4)))


def _vivit(name, temporal_depth):
    stages = [StageSpec(depth=12, dim=768, heads=12, attention_kind="Global",
                        scope="spatial" if temporal_depth else "st")]
    if temporal_depth:
        stages.append(StageSpec(depth=temporal_depth, dim=768, heads=12,
                                attention_kind="Global", scope="temporal"))
    return ModelConfig(
        name=name, patch_size=(2, 16, 16), in_channels=3, num_classes=400,
        input_size=(32, 224, 224), positional_embedding="absolute",
        use_relpos_bias=False, stages=tuple(stages))


def _uniformer_small():
    return ModelConfig(
        name="uniformer_small", patch_size=(2, 4, 4), stem_kernel=(3, 4, 4),
        in_channels=3, num_classes=400, input_size=(16, 224, 224),
        use_relpos_bias=False,
        stages=(
            StageSpec(depth=3, dim=64, heads=1, attention_kind="LocalMHRA",
                      kernel=(5, 5, 5), merge_after=True),
            StageSpec(depth=4, dim=128, heads=2, attention_kind="LocalMHRA",
                      kernel=(5, 5, 5), merge_after=True),
            StageSpec(depth=8, dim=320, heads=5, attention_kind="Global",
                      merge_after=True),
            StageSpec(depth=3, dim=512, heads=8, attention_kind="Global")))


def _mvitv2_small():
    return ModelConfig(
        name="mvitv2_small", patch_size=(2, 4, 4), stem_kernel=(3, 7, 7),
        in_channels=3, num_classes=400, input_size=(16, 224, 224),
        stages=(
            StageSpec(depth=1, dim=96, heads=1, attention_kind="PooledAttention",
                      pool_kv=(1, 8, 8)),
            StageSpec(depth=2, dim=192, heads=2, attention_kind="PooledAttention",
                      pool_q=(1, 2, 2), pool_kv=(1, 4, 4)),
            StageSpec(depth=11, dim=384, heads=4, attention_kind="PooledAttention",
                      pool_q=(1, 2, 2), pool_kv=(1, 2, 2)),
            StageSpec(depth=2, dim=768, heads=8, attention_kind="PooledAttention",
                      pool_q=(1, 2, 2))))


def _resnet50(name, kind, stem_kernel):
    inflate = kind == "Conv3D"
    return ModelConfig(
        name=name, patch_size=(1, 4, 4), stem_kernel=stem_kernel, in_channels=3,
        num_classes=400, input_size=(8, 224, 224), use_relpos_bias=False,
        stages=(
            StageSpec(depth=3, dim=256, heads=1, attention_kind=kind,
                      inflate_alternating=inflate, temporal_pool_after=True),
            StageSpec(depth=4, dim=512, heads=1, attention_kind=kind,
                      inflate_alternating=inflate),
            StageSpec(depth=6, dim=1024, heads=1, attention_kind=kind,
                      inflate_alternating=inflate),
            StageSpec(depth=3, dim=2048, heads=1, attention_kind=kind,
                      inflate_alternating=inflate)))


# toy presets ---------------------------------------------------------------

TOY_INPUT = (8, 32, 32)


def _toy_vst():
    return ModelConfig(
        name="toy_vst", patch_size=(2, 4, 4), in_channels=3, num_classes=10,
        input_size=TOY_INPUT, positional_embedding="relative",
        # one merge only: after it the grid is 4x4x4 with 2x2x2 windows, so a
        # fixed partition never mixes across windows at any depth and the
        # shifted variant is the sole cross-window pathway
        stages=(
            _win(2, 48, 2, (2, 2, 2), merge_after=True),
            _win(2, 96, 4, (2, 2, 2)),
            _win(2, 96, 4, (2, 2, 2)),
            _win(2, 96, 4, (2, 2, 2))))


def _toy_vivit(name, temporal_depth):
    stages = [StageSpec(depth=4 if not temporal_depth else 3, dim=96, heads=4,
                        attention_kind="Global",
                        scope="spatial" if temporal_depth else "st")]
    if temporal_depth:
        stages.append(StageSpec(depth=temporal_depth, dim=96, heads=4,
                                attention_kind="Global", scope="temporal"))
    return ModelConfig(
        name=name, patch_size=(2, 4, 4), in_channels=3, num_classes=10,
        input_size=TOY_INPUT, positional_embedding="absolute",
        use_relpos_bias=False, stages=tuple(stages))


def _toy_uniformer():
    return ModelConfig(
        name="toy_uniformer", patch_size=(2, 4, 4), in_channels=3, num_classes=10,
        input_size=TOY_INPUT, use_relpos_bias=False,
        stages=(
            StageSpec(depth=2, dim=32, heads=1, attention_kind="LocalMHRA",
                      kernel=(3, 3, 3), merge_after=True),
            StageSpec(depth=2, dim=64, heads=2, attention_kind="LocalMHRA",
                      kernel=(3, 3, 3), merge_after=True),
            StageSpec(depth=2, dim=128, heads=4, attention_kind="Global"),
            StageSpec(depth=2, dim=128, heads=4, attention_kind="Global")))


def _toy_mvitv2():
    return ModelConfig(
        name="toy_mvitv2", patch_size=(2, 4, 4), in_channels=3, num_classes=10,
        input_size=TOY_INPUT,
        stages=(
            StageSpec(depth=1, dim=32, heads=2, attention_kind="PooledAttention",
                      pool_kv=(1, 2, 2), merge_after=True),
            StageSpec(depth=2, dim=64, heads=4, attention_kind="PooledAttention",
                      pool_kv=(1, 2, 2), merge_after=True),
            StageSpec(depth=2, dim=128, heads=8, attention_kind="PooledAttention")))


def _toy_cnn(name, kind):
    inflate = kind == "Conv3D"
    return ModelConfig(
        name=name, patch_size=(1, 2, 2), stem_kernel=(3 if inflate else 1, 5, 5),
        in_channels=3, num_classes=10, input_size=TOY_INPUT, use_relpos_bias=False,
        stages=(
            StageSpec(depth=2, dim=64, heads=1, attention_kind=kind,
                      inflate_alternating=inflate),
            StageSpec(depth=2, dim=128, heads=1, attention_kind=kind,
                      inflate_alternating=inflate)))


def _catalog() -> dict[str, PresetInfo]:
    vst_s = _vst("vst_small", (96, 192, 384, 768), (2, 2, 18, 2), (3, 6, 12, 24))
    vst_b = _vst("vst_base", (128, 256, 512, 1024), (2, 2, 18, 2), (4, 8, 16, 32))
    out = {
        "vst_small": PresetInfo(vst_s, 49.8, 166.0),
        "vst_base": PresetInfo(vst_b, 88.1, 282.0),
        "uniformer_small": PresetInfo(_uniformer_small(), 21.4, 167.2, eval_views=4),
        "mvitv2_small": PresetInfo(_mvitv2_small(), 34.5, 64.5),
        "vivit_st": PresetInfo(_vivit("vivit_st", 0), 88.9, 455.2),
        "vivit_fe": PresetInfo(_vivit("vivit_fe", 4), 115.1, 284.0),
        "i3d_r50": PresetInfo(_resnet50("i3d_r50", "Conv3D", (5, 7, 7)), 28.1, 28.5),
        "c2d_r50": PresetInfo(_resnet50("c2d_r50", "Conv2D", (1, 7, 7)), 24.3, 19.6),
        "toy_vst": PresetInfo(_toy_vst()),
        "toy_vst_llgg": PresetInfo(llgg_transform(_toy_vst())),
        "toy_vivit_st": PresetInfo(_toy_vivit("toy_vivit_st", 0)),
        "toy_vivit_fe": PresetInfo(_toy_vivit("toy_vivit_fe", 2)),
        "toy_uniformer": PresetInfo(_toy_uniformer()),
        "toy_mvitv2": PresetInfo(_toy_mvitv2()),
        "toy_cnn3d": PresetInfo(_toy_cnn("toy_cnn3d", "Conv3D")),
        "toy_cnn2d": PresetInfo(_toy_cnn("toy_cnn2d", "Conv2D")),
    }
    return out


_CACHE: dict[str, PresetInfo] | None = None


def presets() -> dict[str, PresetInfo]:
    global _CACHE
    if _CACHE is None:
        _CACHE = _catalog()
    return _CACHE


def get_preset(name: str) -> PresetInfo:
    cat = presets()
    if name not in cat:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(cat))}")
    return cat[name]
