#   Copyright 2024 The spkadapt Authors
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.
from spkadapt.adapt.harness import (
        AdaptationConfig,
        AdaptationResult,
        FerReport,
        PartitionSet,
        PartitionType,
        adapt_all,
        adapt_partition,
        evaluate,
        first_pass_targets,
        frame_error_report,
        slot_key,
        split_train_cv
    )

from spkadapt.adapt.pipeline import (
        DataSplit,
        PipelineConfig,
        PipelineReport,
        adaptation_grid,
        cumulative_pipeline,
        ivector_norm_grid,
        parse_positions,
        ubm_feature_grid
    )
