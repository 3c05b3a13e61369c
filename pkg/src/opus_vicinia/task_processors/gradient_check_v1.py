from typing import Dict

import numpy as np

from magnum_opus.operarius import LoggerWrapper, Task

from opus_vicinia.models import MODEL_KINDS, UnknownModelException, random_gradcheck_instance
from opus_vicinia.neural_core import SoftmaxRegression, gradcheck
from opus_vicinia.task_processors.base import EXIT_FAILURE, EXIT_SUCCESS, PipelineTaskProcessor, SpecFieldException


GRADCHECK_TOLERANCE = 1e-5
GRADCHECK_EPSILON = 1e-5
GRADCHECK_KINDS = MODEL_KINDS + (SoftmaxRegression.kind,)
CORRUPTION_FACTOR = 1.01


def corrupt_gradients(grads: Dict[str, np.ndarray])->Dict[str, np.ndarray]:
    """Scale every analytic gradient by 1%; a correct checker must reject the result."""
    return {name: g * CORRUPTION_FACTOR for name, g in grads.items()}


class GradientCheck(PipelineTaskProcessor):

    def __init__(self, kind: str='GradientCheck', kind_versions: list=['v1',], supported_commands: list=list(), logger: LoggerWrapper=LoggerWrapper()):
        super().__init__(kind, kind_versions, supported_commands, logger)

    def run(self, task: Task, command: str, context: str, log_header: str)->dict:
        """Compare analytic gradients against central finite differences on random instances.

        # Spec fields

        | Field                   | Type  | Required | In Versions | Description                                                                   |
        |-------------------------|:-----:|:--------:|:-----------:|-------------------------------------------------------------------------------|
        | `model`                 | str   | Yes      | v1          | `gcn`, `mlp-neighbors`, `mlp-local` or `softmax-regression`                   |
        | `seed`                  | int   | No       | v1          | Seed of the first instance (default 0)                                        |
        | `instances`             | int   | No       | v1          | Number of instances, seeded `seed`, `seed + 1`, ... (default 1)               |
        | `tolerance`             | float | No       | v1          | Largest accepted relative error (default 1e-5)                                |
        | `corruptGradient`       | bool  | No       | v1          | Scale the analytic gradients by 1% before comparing (default `False`)         |
        | `raiseExceptionOnError` | bool  | No       | v1          | Default value is `False`. If set to `True`, any failure raises an exception   |

        Returns:
            Results stored in the `KeyValueStore`:

            * `MODEL` - The model kind
            * `MAX_RELATIVE_ERROR` - Largest relative error over all instances and parameters
            * `PASSED` - `True` when the error is within the tolerance
            * `EXIT_CODE` - 0 when passed, 1 otherwise
        """
        model_kind = self.spec_value('model', required=True)
        if model_kind not in GRADCHECK_KINDS:
            raise UnknownModelException('unknown model "{}" (valid: {})'.format(model_kind, ', '.join(GRADCHECK_KINDS)))
        seed = self.spec_int('seed', default=0)
        instances = self.spec_int('instances', default=1)
        if seed < 0:
            raise SpecFieldException('spec field "seed" must not be negative, got {}'.format(seed))
        if instances < 1:
            raise SpecFieldException('spec field "instances" must be positive, got {}'.format(instances))
        tolerance = self.spec_float('tolerance', default=GRADCHECK_TOLERANCE)
        gradient_hook = None
        if self.spec_bool('corruptGradient', default=False) is True:
            self.log(message='Analytic gradients are deliberately corrupted', build_log_message_header=False, level='warning', header=log_header)
            gradient_hook = corrupt_gradients

        worst = 0.0
        for instance_seed in range(seed, seed + instances):
            model, sample = random_gradcheck_instance(model_kind=model_kind, rng=np.random.default_rng(instance_seed))
            error = gradcheck(model=model, sample=sample, epsilon=GRADCHECK_EPSILON, gradient_hook=gradient_hook)
            self.log(message='{} seed {}: max relative error {:.3e}'.format(model_kind, instance_seed, error), build_log_message_header=False, level='debug', header=log_header)
            worst = max(worst, error)
        passed = worst <= tolerance
        self.log(
            message='{}: max relative error {:.3e} over {} instance(s) - {}'.format(model_kind, worst, instances, 'PASSED' if passed else 'FAILED'),
            build_log_message_header=False,
            level='info' if passed else 'error',
            header=log_header
        )
        return {
            'MODEL': model_kind,
            'MAX_RELATIVE_ERROR': worst,
            'PASSED': passed,
            'EXIT_CODE': EXIT_SUCCESS if passed else EXIT_FAILURE,
            'ERROR': None if passed else 'max relative error {:.3e} exceeds {:.1e}'.format(worst, tolerance),
        }
