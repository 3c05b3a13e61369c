# Hooks
from opus_vicinia.hooks.kvs_hook import spec_variable_key_value_store_resolver

# Task Processors
from opus_vicinia.task_processors.feature_extraction_v1 import FeatureExtraction
from opus_vicinia.task_processors.synthetic_city_v1 import SyntheticCity
from opus_vicinia.task_processors.spatial_cross_validation_v1 import SpatialCrossValidation
from opus_vicinia.task_processors.gradient_check_v1 import GradientCheck
from opus_vicinia.task_processors.model_comparison_v1 import ModelComparison

# General imports
from typing import List, Optional
from magnum_opus.operarius import Hook, Hooks, Task, TaskProcessor, Tasks, LoggerWrapper, KeyValueStore, StatePersistence, TaskLifecycleStage, TaskLifecycleStages


DEFAULT_COMMAND = 'apply'
DEFAULT_CONTEXT = 'default'


def build_task_lifecycle_stages(task_lifecycle_stages_list: list)->TaskLifecycleStages:
    task_life_cycle_stages = TaskLifecycleStages(init_default_stages=False)
    stage: TaskLifecycleStage
    for stage in task_lifecycle_stages_list:
        if isinstance(stage, TaskLifecycleStage):
            task_life_cycle_stages.register_lifecycle_stage(task_life_cycle_stage=stage)
    return task_life_cycle_stages


STANDARD_HOOKS = {
    'spec_variable_key_value_store_resolver': {
        'Function': spec_variable_key_value_store_resolver,
        'Commands': ['ALL'],
        'Contexts': ['ALL'],
        'TaskLifeCycleStages': build_task_lifecycle_stages(task_lifecycle_stages_list=[TaskLifecycleStage.TASK_PRE_PROCESSING_START,],)
    },
}


def all_task_processors()->list:
    return [
        FeatureExtraction(),
        SyntheticCity(),
        SpatialCrossValidation(),
        GradientCheck(),
        ModelComparison(),
    ]


def build_hooks(selected_hooks: dict=STANDARD_HOOKS)->Hooks:
    hooks = Hooks()
    hook: Hook
    for hook_name, hook_config in selected_hooks.items():
        hook = Hook(
            name=hook_name,
            commands=hook_config['Commands'],
            contexts=hook_config['Contexts'],
            task_life_cycle_stages=hook_config['TaskLifeCycleStages'],
            function_impl=hook_config['Function']
        )
        hooks.register_hook(hook=hook)
    return hooks


def build_task_processors(selected_task_processors: Optional[list]=None, logger: LoggerWrapper=LoggerWrapper())->list:
    if selected_task_processors is None:
        selected_task_processors = all_task_processors()
    task_processors = list()
    task_processor: TaskProcessor
    for task_processor in selected_task_processors:
        task_processor.logger = logger
        task_processors.append(task_processor)
    return task_processors


def build_tasks(
    logger: LoggerWrapper=LoggerWrapper(),
    key_value_store: Optional[KeyValueStore]=None,
    state_persistence: Optional[StatePersistence]=None,
    selected_hooks: dict=STANDARD_HOOKS,
    selected_task_processors: Optional[list]=None
)->Tasks:
    """A `Tasks` collection with the standard hooks and every opus-vicinia task processor registered.

    Each call gets its own key value store and state persistence unless they are supplied.
    """
    tasks = Tasks(
        logger=logger,
        key_value_store=key_value_store if key_value_store is not None else KeyValueStore(),
        hooks=build_hooks(selected_hooks=selected_hooks),
        state_persistence=state_persistence if state_persistence is not None else StatePersistence()
    )
    for task_processor in build_task_processors(selected_task_processors=selected_task_processors, logger=logger):
        tasks.register_task_processor(processor=task_processor)
    return tasks


def build_pipeline_task(kind: str, task_id: str, spec: dict, depends_on: Optional[List[str]]=None, logger: LoggerWrapper=LoggerWrapper())->Task:
    metadata = {
        "identifiers": [
            {
                "type": "ManifestName",
                "key": task_id
            },
        ]
    }
    if depends_on is not None and len(depends_on) > 0:
        metadata['dependencies'] = [
            {
                "identifierType": "ManifestName",
                "identifiers": [{"key": dependency} for dependency in depends_on]
            }
        ]
    return Task(kind=kind, version='v1', spec=spec, metadata=metadata, logger=logger)


def task_result(key_value_store: KeyValueStore, kind: str, task_id: str, name: str, command: str=DEFAULT_COMMAND, context: str=DEFAULT_CONTEXT, default: object=None)->object:
    return key_value_store.store.get('{}:{}:{}:{}:{}'.format(kind, task_id, command, context, name), default)


def run_pipeline(
    tasks_to_process: List[Task],
    logger: LoggerWrapper=LoggerWrapper(),
    command: str=DEFAULT_COMMAND,
    context: str=DEFAULT_CONTEXT
)->KeyValueStore:
    """Process `tasks_to_process` in dependency order and return the resulting key value store."""
    tasks = build_tasks(logger=logger)
    for task in tasks_to_process:
        tasks.add_task(task=task)
    tasks.process_context(command=command, context=context)
    tasks.state_persistence.persist_all_state()
    return tasks.key_value_store
