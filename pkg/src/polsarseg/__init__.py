"""Multi-path residual segmentation of 4-channel PolSAR imagery.

Library layout:
  engine    differentiable tensor core (conv, pooling, norm, upsampling, loss)
  blocks    stem / basic residual block / bottleneck deconvolution block
  models    mp_resnet and fcn_baseline assembly, checkpoints
  analysis  parameter/FLOP counting and receptive fields
  metrics   confusion matrix, OA, F1, fwIoU
  data      PSAR tile formats, preprocessing, synthetic scenes, fold splits
  train     SGD harness, gradient checking, map prediction
  cli       command-line workflows (synth, split, train, eval, predict,
            analyze, ablate)
"""

__version__ = "0.1.0"
