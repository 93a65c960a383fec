"""Validators return ``(ok, error_message)`` tuples; ``error_message`` is None when ok."""

from sure_denoise.models import ARCHITECTURES, NOISE_KINDS, OBJECTIVE_KINDS


DATASET_KINDS = ['mnist', 'synthetic', 'pgm', 'manifest']
MNIST_SPLITS = ['train', 'validation', 'test', 'all']
SUITES = ['divergence', 'unbiasedness', 'pure', 'epsilon']


def validate_int(value, low=None, high=None):
    if isinstance(value, bool) or not isinstance(value, int):
        return False, 'must be an integer'
    if low is not None and value < low:
        return False, f'must be >= {low}'
    if high is not None and value > high:
        return False, f'must be <= {high}'
    return True, None


def validate_number(value, low=None, high=None, strict_low=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return False, 'must be a number'
    if low is not None:
        if strict_low and not value > low:
            return False, f'must be > {low}'
        if value < low:
            return False, f'must be >= {low}'
    if high is not None and value > high:
        return False, f'must be <= {high}'
    return True, None


def validate_positive(value):
    return validate_number(value, 0, strict_low=True)


def validate_bool(value):
    if not isinstance(value, bool):
        return False, 'must be true or false'
    return True, None


def validate_path(value):
    if not value or not isinstance(value, str):
        return False, 'must be a non-empty path string'
    return True, None


def validate_path_list(value):
    if not isinstance(value, list) or not value:
        return False, 'must be a non-empty list of paths'
    for item in value:
        ok, error = validate_path(item)
        if not ok:
            return False, f'every entry {error}'
    return True, None


def validate_choice(choices):
    def check(value):
        if value not in choices:
            return False, f'must be one of: {", ".join(choices)}'
        return True, None
    return check


def validate_sigma_range(value):
    if not isinstance(value, list) or len(value) != 2:
        return False, 'must be a [low, high] pair'
    for v in value:
        ok, error = validate_number(v, 0)
        if not ok:
            return False, f'bounds {error}'
    if not value[0] < value[1]:
        return False, 'low must be below high'
    return True, None


def validate_size(value):
    if not isinstance(value, list) or len(value) != 2:
        return False, 'must be a [height, width] pair'
    for v in value:
        ok, error = validate_int(v, 1)
        if not ok:
            return False, f'extents {error}'
    return True, None


def validate_number_list(value):
    if not isinstance(value, list) or not value:
        return False, 'must be a non-empty list of numbers'
    for v in value:
        ok, error = validate_positive(v)
        if not ok:
            return False, f'every entry {error}'
    return True, None


def validate_suites(value):
    if not isinstance(value, list) or not value:
        return False, 'must be a non-empty list of suite names'
    unknown = [s for s in value if s not in SUITES]
    if unknown:
        return False, f'unknown suite {unknown[0]!r}; choose from: {", ".join(SUITES)}'
    return True, None


def optional(check):
    def wrapped(value):
        if value is None:
            return True, None
        return check(value)
    return wrapped


# A schema maps keys to (check, required); a check is a validator or a nested schema.
DATASET_SCHEMA = {
    'kind': (validate_choice(DATASET_KINDS), True),
    'images': (validate_path, False),
    'labels': (validate_path, False),
    'split': (validate_choice(MNIST_SPLITS), False),
    'limit': (lambda v: validate_int(v, 1), False),
    'n': (lambda v: validate_int(v, 1), False),
    'size': (validate_size, False),
    'pattern': (validate_choice(['strokes', 'gradients', 'checker']), False),
    'paths': (validate_path_list, False),
    'clean_paths': (validate_path_list, False),
    'path': (validate_path, False),
    'ground_truth': (validate_bool, False),
    'patch': (validate_size, False),
    'patch_count': (lambda v: validate_int(v, 1), False),
}

NOISE_SCHEMA = {
    'kind': (validate_choice(list(NOISE_KINDS)), True),
    'sigma': (lambda v: validate_number(v, 0), False),
    'sigma_range': (validate_sigma_range, False),
    'zeta': (validate_positive, False),
}

ARCHITECTURE_SCHEMA = {
    'tag': (validate_choice(list(ARCHITECTURES)), True),
    'depth': (lambda v: validate_int(v, 3), False),
    'channels': (lambda v: validate_int(v, 1), False),
    'in_channels': (lambda v: validate_int(v, 1), False),
}

OBJECTIVE_SCHEMA = {
    'kind': (validate_choice(list(OBJECTIVE_KINDS)), True),
    'epsilon': (optional(validate_positive), False),
}

TRAINING_SCHEMA = {
    'epochs': (lambda v: validate_int(v, 0), False),
    'batch_size': (lambda v: validate_int(v, 1), False),
    'optimizer': (validate_choice(['adam', 'sgd']), False),
    'lr': (validate_positive, False),
    'lr_decay_epoch': (optional(lambda v: validate_int(v, 0)), False),
    'lr_decayed': (optional(validate_positive), False),
    'weight_decay': (lambda v: validate_number(v, 0), False),
    'checkpoint_every': (lambda v: validate_int(v, 0), False),
    'probe_mode': (validate_choice(['per_epoch', 'per_batch']), False),
    'regenerate_noise': (optional(validate_bool), False),
    'early_stopping_patience': (optional(lambda v: validate_int(v, 0)), False),
    'freeze_batch_norm': (validate_bool, False),
}

REFINE_SCHEMA = {
    'checkpoint': (validate_path, True),
    'image': (validate_path, True),
    'sigma': (validate_positive, True),
    'epochs': (lambda v: validate_int(v, 0), False),
    'lr': (validate_positive, False),
    'lr_decay_epoch': (optional(lambda v: validate_int(v, 0)), False),
    'lr_decayed': (optional(validate_positive), False),
    'epsilon': (optional(validate_positive), False),
    'keep_best': (validate_bool, False),
    'gt': (validate_path, False),
}

DENOISE_SCHEMA = {
    'checkpoint': (validate_path, True),
    'images': (validate_path_list, True),
    'gt': (validate_path_list, False),
}

VALIDATE_SCHEMA = {
    'suites': (validate_suites, False),
    'arch': (validate_choice(list(ARCHITECTURES) + ['identity', 'linear']), False),
    'checkpoint': (validate_path, False),
    'image': (validate_path, False),
    'sigma': (validate_positive, False),
    'epsilon': (validate_positive, False),
    'n_draws': (lambda v: validate_int(v, 2), False),
    'realizations': (lambda v: validate_int(v, 2), False),
    'zeta': (validate_positive, False),
    'eps_grid': (validate_number_list, False),
    'epochs': (lambda v: validate_int(v, 1), False),
}

COMMON = {
    'seed': (lambda v: validate_int(v, 0), False),
    'output_dir': (validate_path, False),
    'threads': (lambda v: validate_int(v, 1), False),
    'log_level': (validate_choice(['DEBUG', 'INFO', 'WARNING', 'ERROR']), False),
}

COMMAND_SCHEMAS = {
    'corrupt': {**COMMON, 'dataset': (DATASET_SCHEMA, True), 'noise': (NOISE_SCHEMA, True),
                'previews': (validate_bool, False)},
    'train': {**COMMON, 'dataset': (DATASET_SCHEMA, True), 'validation': (DATASET_SCHEMA, False),
              'architecture': (ARCHITECTURE_SCHEMA, True), 'objective': (OBJECTIVE_SCHEMA, True),
              'noise': (NOISE_SCHEMA, False), 'training': (TRAINING_SCHEMA, False)},
    'refine': {**COMMON, 'refine': (REFINE_SCHEMA, True)},
    'denoise': {**COMMON, 'denoise': (DENOISE_SCHEMA, True)},
    'validate': {**COMMON, 'validate': (VALIDATE_SCHEMA, False), 'dataset': (DATASET_SCHEMA, False),
                 'test': (DATASET_SCHEMA, False), 'training': (TRAINING_SCHEMA, False)},
}


def check_schema(document, schema, path=''):
    """Strict check: unknown keys are rejected and errors name the dotted field path."""
    if not isinstance(document, dict):
        return False, f'{path or "config"} must be an object'
    for key in document:
        if key not in schema:
            return False, f'{path}{key}: unknown key'
    for key, (check, required) in schema.items():
        where = f'{path}{key}'
        if key not in document:
            if required:
                return False, f'{where}: missing required field'
            continue
        if isinstance(check, dict):
            ok, error = check_schema(document[key], check, f'{where}.')
            if not ok:
                return False, error
            continue
        ok, error = check(document[key])
        if not ok:
            return False, f'{where}: {error}'
    return True, None


def validate_dataset_block(block, path='dataset'):
    needs = {
        'mnist': ['images'],
        'synthetic': ['n', 'size', 'pattern'],
        'pgm': ['paths'],
        'manifest': ['path'],
    }
    for key in needs[block['kind']]:
        if key not in block:
            return False, f'{path}.{key}: missing required field for {block["kind"]} datasets'
    return True, None


def validate_noise_block(block, path='noise'):
    if block['kind'] == 'gaussian':
        has_sigma = block.get('sigma', 0) > 0
        has_range = 'sigma_range' in block
        if has_sigma == has_range:
            return False, f'{path}: gaussian noise needs exactly one of sigma > 0 or sigma_range'
    elif 'zeta' not in block:
        return False, f'{path}.zeta: missing required field for poisson noise'
    return True, None


def validate_run_config(command, document):
    schema = COMMAND_SCHEMAS.get(command)
    if schema is None:
        return False, f'unknown command {command!r}'
    ok, error = check_schema(document, schema)
    if not ok:
        return ok, error
    for key in ('dataset', 'validation', 'test'):
        if key in document:
            ok, error = validate_dataset_block(document[key], key)
            if not ok:
                return ok, error
    if 'noise' in document:
        return validate_noise_block(document['noise'])
    return True, None
