"""Dynamic scene-graph Gaussian splatting: parameters, projection, forward
rendering, analytic backward, and checkpoints."""

from .params import (  # noqa: F401
    GaussianScene,
    GaussianSet,
    ObjectNode,
    PoseCorrections,
    SkyCubemap,
    inverse_sigmoid,
    sigmoid,
)
from .projection import (  # noqa: F401
    apply_mip_filter,
    covariance_world,
    perspective_jacobian,
    project_covariance,
)
from .render import (  # noqa: F401
    RenderConfig,
    RenderOutput,
    grad_check_config,
    render,
    render_reference,
    warp_object,
)
from .backward import CorrectionGrads, ParamGrads, SceneGrads, render_backward  # noqa: F401
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401
