from tswitch.algo.pulse import (
    Scope,
    PulseMask,
    PulseUnit,
    pulse_mask,
    p_discard,
    discard_high,
    dare_discard,
    discard,
)
from tswitch.algo.binarize import (
    SwitchTensor,
    TaskSwitchPack,
    StorageReport,
    bin_discard,
    build_pack,
    reconstruct,
    encode_tsw,
    decode_tsw,
    storage_report,
)
from tswitch.algo.merge import (
    MergeMethod,
    MergeRecipe,
    register_merge_func,
    merge_factory,
    merge,
    direct_merge,
    direct_merge_scale,
    weight_average,
    task_arithmetic,
    apply_switch,
    apply_auto,
)
from tswitch.algo.router import (
    QueryIndex,
    RouteWeights,
    SwitchCache,
    build_query_index,
    knn_weights,
    route,
    route_and_apply,
    save_tqi,
    load_tqi,
)
