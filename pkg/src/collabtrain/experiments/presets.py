"""Desk-scale network presets used by the default experiment grid.

Both nets read as three blocks (feature extractor | hidden dense |
classifier) with split markers s1 and s2 at the block boundaries.  The
markers sit deep enough that the bulk of the parameters lies below s1,
which keeps the training-graph size ordering
multi-instance > hierarchical > shared-prefix > single.
"""

from ..netspec import (
    AvgPoolDef,
    ConvDef,
    DenseDef,
    FlattenDef,
    NetSpec,
    ReluDef,
    SplitMarker,
)


def blobs_mlp() -> NetSpec:
    """4 dense layers for 32-d vector inputs, 10 classes."""
    return NetSpec(
        input_shape=(32,),
        num_classes=10,
        layers=[
            DenseDef(32, 64),
            ReluDef(),
            DenseDef(64, 64),
            ReluDef(),
            DenseDef(64, 48),
            ReluDef(),
            DenseDef(48, 10),
        ],
        splits=[SplitMarker("s1", 4), SplitMarker("s2", 6)],
    )


def digits_cnn() -> NetSpec:
    """2 conv blocks + dense head for 1x8x8 images, 10 classes."""
    return NetSpec(
        input_shape=(1, 8, 8),
        num_classes=10,
        layers=[
            ConvDef(1, 16, 3, pad=1),
            ReluDef(),
            AvgPoolDef(2),
            ConvDef(16, 16, 3, pad=1),
            ReluDef(),
            AvgPoolDef(2),
            FlattenDef(),
            DenseDef(64, 48),
            ReluDef(),
            DenseDef(48, 10),
        ],
        splits=[SplitMarker("s1", 7), SplitMarker("s2", 9)],
    )


PRESET_NETS = {
    "blobs-mlp": blobs_mlp,
    "digits-cnn": digits_cnn,
}
