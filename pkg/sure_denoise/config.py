import os


class Config:
    THREADS = int(os.environ.get('SURE_DENOISE_THREADS') or 1)
    LOG_LEVEL = os.environ.get('SURE_DENOISE_LOG_LEVEL') or 'INFO'
    LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
    DEFAULT_SEED = int(os.environ.get('SURE_DENOISE_SEED') or 0)
    MNIST_DIR = os.environ.get('SURE_DENOISE_MNIST_DIR')

    # images live in [0, 1]; sigma values in configs are on the 0-255 scale
    INTENSITY_SCALE = 255.0

    MNIST_TRAIN_COUNT = 55000
    MNIST_VALIDATION_COUNT = 5000
    MNIST_TEST_COUNT = 100
    MNIST_TEST_SEED = 2018
    MNIST_IMAGE_MAGIC = 0x00000803
    MNIST_LABEL_MAGIC = 0x00000801

    SDA_EPSILON = 1e-4
    RESIDUAL_EPSILON_SCALE = 1.4e-4
    BLIND_EPSILON_SCALE = 1.2e-4
    PURE_EPSILON = 1e-3
    PURE_EPSILON_RANGE = (1e-6, 1e-2)
    PURE_ZETA_WARN = 0.2
    BLIND_SIGMA_RANGE = (0.0, 55.0)

    FD_STEP = 1e-3
    ORACLE_STDERR_MULTIPLE = 4.0
    ORACLE_CHUNK = 50
    MAX_EXACT_DIVERGENCE_PIXELS = 4096

    BN_EPS = 1e-5
    BN_MOMENTUM = 0.1

    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPS = 1e-8

    SDA_IMAGE_SIZE = (28, 28)
    SDA_CHANNELS = (32, 64)
    DNCNN_DEPTH = 7
    DNCNN_CHANNELS = 32

    TRAIN_EPOCHS = 100
    TRAIN_BATCH_SIZE = 200
    TRAIN_LR = 1e-3
    EARLY_STOPPING_PATIENCE = 3

    REFINE_EPOCHS = 75
    REFINE_LR = 1e-4
    REFINE_LR_DECAY_EPOCH = 50
    REFINE_LR_DECAYED = 5e-5
    REFINE_EVAL_PROBES = 4

    CHECKPOINT_MAGIC = b'SURE\x00NET1'
    CHECKPOINT_VERSION = 1
