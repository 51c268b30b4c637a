from .graph import Batch, SceneGraph, build_scene_graph, collate, frame_of, prepare_graphs
from .nets import Forward, KdFeaturePair, forward, init_params, kd_pairs, loss_kd, loss_pred, predict_global
