"""Feature-based visual servoing toolkit with a simulated camera loop."""

from .control import (
    ControlConfig,
    control_law,
    feature_error,
    point_interaction_matrix,
    pseudo_inverse,
    stack_interaction,
)
from .features import (
    FeatureSet,
    Keypoint,
    SyntheticDetector,
    SyntheticDetectorConfig,
    read_features,
    synthetic_detect,
    top_k,
    write_features,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    Twist,
    compose,
    integrate_twist,
    inverse,
    pixel_to_normalized,
    pose_error,
    project,
    relative,
)
from .matching import (
    CorrespondenceSet,
    InlierSet,
    RansacConfig,
    TrackingState,
    match_nn,
    mean_correspondence_error,
    ransac_inliers,
    tracking_update,
)
from .simulate import (
    DEFAULT_INTRINSICS,
    Scene,
    ServoRunConfig,
    ServoTrace,
    make_box_scene,
    render_target,
    run_servo,
)

__version__ = "0.1.0"
