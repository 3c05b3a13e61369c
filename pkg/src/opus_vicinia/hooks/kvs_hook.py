import copy
import re
from magnum_opus.operarius import Task, KeyValueStore, LoggerWrapper, TaskLifecycleStage


REFERENCE_PATTERN = re.compile(r'(\$\{KVS:[\w\-.;]+(?::[\w\-.;]+)+\})')


class UnresolvedReferenceException(Exception):
    pass


def is_iterable(data: object, exclude_dict: bool=True, exclude_string: bool=True)->bool:
    if data is None:
        return False
    if exclude_dict is True and isinstance(data, dict):
        return False
    if exclude_string is True and isinstance(data, str):
        return False
    try:
        iter(data)
    except TypeError:
        return False
    return True


def lookup_value(raw_key: str, command: str, context: str, logger: LoggerWrapper, hook_name: str, key_value_store: KeyValueStore)->object:
    # Key in key_value_store : SyntheticCity:city:apply:default:OUTPUT_FILE
    # Expected raw_key       : ${KVS:city:OUTPUT_FILE}
    if raw_key.startswith('${KVS:') is False or raw_key.endswith('}') is False:
        raise UnresolvedReferenceException('malformed reference "{}"'.format(raw_key))
    key_parts = raw_key[2:-1].split(':')            # ['KVS', 'city', 'OUTPUT_FILE']
    target_task_id = key_parts[1]
    target_index = ':'.join(key_parts[2:])
    lookup_key_base = '{}:{}:{}:{}'.format(target_task_id, command, context, target_index)
    logger.debug('[{}]         Looking for a key ending in "{}"'.format(hook_name, lookup_key_base))
    for key in list(key_value_store.store.keys()):
        parts = key.split(':', 1)
        if len(parts) == 2 and parts[1] == lookup_key_base:
            logger.info('[{}]             Resolved key "{}" for reference "{}"'.format(hook_name, key, raw_key))
            return copy.deepcopy(key_value_store.store[key])
    raise UnresolvedReferenceException('reference "{}" does not match any stored result for command "{}" and context "{}"'.format(raw_key, command, context))


def analyse_data(data: object, key_value_store: KeyValueStore, command: str, context: str, task_id: str, logger: LoggerWrapper, hook_name: str)->object:
    """Replace `${KVS:<task_id>:<NAME>}` references anywhere inside `data`.

    A string that is exactly one reference takes the stored value with its own type;
    references embedded in a longer string are formatted as text.
    """
    if data is None:
        return data
    if isinstance(data, str) is True:
        matches = REFERENCE_PATTERN.findall(data)
        if len(matches) == 0:
            return data
        logger.debug('[{}]   task "{}" - references in "{}": {}'.format(hook_name, task_id, data, matches))
        if len(matches) == 1 and matches[0] == data:
            return lookup_value(raw_key=data, command=command, context=context, logger=logger, hook_name=hook_name, key_value_store=key_value_store)
        modified_data = data
        for match in matches:
            final_value = lookup_value(raw_key=match, command=command, context=context, logger=logger, hook_name=hook_name, key_value_store=key_value_store)
            modified_data = modified_data.replace(match, '{}'.format(final_value))
        return modified_data
    if isinstance(data, dict) is True:
        modified_data = dict()
        for key, val in data.items():
            modified_data[key] = analyse_data(data=val, key_value_store=key_value_store, command=command, context=context, task_id=task_id, logger=logger, hook_name=hook_name)
        return modified_data
    if is_iterable(data=data) is True:
        return [
            analyse_data(data=val, key_value_store=key_value_store, command=command, context=context, task_id=task_id, logger=logger, hook_name=hook_name)
            for val in data
        ]
    return copy.deepcopy(data)


def spec_variable_key_value_store_resolver(
    hook_name: str,
    task: Task,
    key_value_store: KeyValueStore,
    command: str,
    context: str,
    task_life_cycle_stage: TaskLifecycleStage,
    extra_parameters: dict,
    logger: LoggerWrapper
)->KeyValueStore:
    new_key_value_store = KeyValueStore()
    new_key_value_store.store = copy.deepcopy(key_value_store.store)

    if task_life_cycle_stage is not TaskLifecycleStage.TASK_PRE_PROCESSING_START:
        return new_key_value_store
    spec_modifier_key = extra_parameters.get('SpecModifierKey', None) if isinstance(extra_parameters, dict) else None
    if isinstance(spec_modifier_key, str) is False or 'TASK_PRE_PROCESSING_START' not in spec_modifier_key:
        return new_key_value_store

    logger.info('[{}] Called on TASK_PRE_PROCESSING_START hook event for task "{}"'.format(hook_name, task.task_id))
    try:
        resolved_spec = analyse_data(
            data=copy.deepcopy(task.spec),
            key_value_store=key_value_store,
            command=command,
            context=context,
            task_id=task.task_id,
            logger=logger,
            hook_name=hook_name,
        )
    except UnresolvedReferenceException as e:
        # the task processor reports the failure with its own exit code
        logger.warning('[{}] {}'.format(hook_name, e))
        return new_key_value_store
    new_key_value_store.save(key=spec_modifier_key, value=resolved_spec)
    return new_key_value_store
