from ._aligndet import (
    Box,
    bilinear_sample,
    conv_forward,
    deform_conv_forward,
    flop_count,
    gemm,
    im2col,
    implicit_roi,
    iou,
    nms,
    roialign,
    roiconv_offsets,
)

__all__ = [
    "Box",
    "bilinear_sample",
    "conv_forward",
    "deform_conv_forward",
    "flop_count",
    "gemm",
    "im2col",
    "implicit_roi",
    "iou",
    "nms",
    "roialign",
    "roiconv_offsets",
]
