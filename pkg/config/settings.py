"""
Django settings for config project.

Generated by 'django-admin startproject' using Django 4.2.

For more information on this file, see
https://docs.djangoproject.com/en/4.2/topics/settings/

For the full list of settings and their values, see
https://docs.djangoproject.com/en/4.2/ref/settings/
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = 'django-insecure-qlvm-command-line-only'

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'qlvm.apps.QlvmConfig',
]


# Database
# https://docs.djangoproject.com/en/4.2/ref/settings/#databases

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization
# https://docs.djangoproject.com/en/4.2/topics/i18n/

LANGUAGE_CODE = 'zh-Hans'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True

# Default primary key field type
# https://docs.djangoproject.com/en/4.2/ref/settings/#default-auto-field

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# 运行配置默认值（全部为字符串，由 qlvm.services.run_config 按类型解析）
QLVM_DEFAULTS = {
    # 数据
    'dataset': 'synth',
    'images_path': '',
    'labels_path': '',
    'matrix_path': '',
    'value_kind': 'binary',
    'image_shape': '',
    'synth_clusters': '8',
    'synth_n': '2000',
    'synth_side': '16',
    'synth_sigma': '',
    'synth_jitter': '',
    'split_fraction': '0.8',
    'data_seed': '0',
    # 模型
    'model': 'qlvm',
    'latent_dim': '2',
    'lattice': 'fibonacci',
    'fib_index': '13',  # Fib(13) = 233
    'lattice_m': '0',
    'korobov_a': '0',  # 0 表示搜索最优底数
    'sampling': 'rqmc',
    'prior': 'uniform',
    'prior_loc': '0.0',
    'prior_scale': '1.0',
    'hidden': '64,64',
    'activation': 'relu',
    'encoder_hidden': '64,64',
    'likelihood': 'bernoulli',
    'variance': '0.1',
    # 训练
    'epochs': '200',
    'batch_size': '64',
    'lr': '0.001',
    'beta1': '0.9',
    'beta2': '0.999',
    'adam_eps': '1e-08',
    'samples': '0',  # 0 表示 vae 用 1 个、iwae 用 10 个样本
    # 评估
    'eval_fib_index': '20',  # Fib(20) = 6765
    'n_shifts': '1',
    'seed': '',
    'output_dir': '',
}

# 日志配置
LOG_DIR = BASE_DIR / 'logs'
os.makedirs(LOG_DIR, exist_ok=True)

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
        'qlvm_file': {
            'class': 'logging.FileHandler',
            'filename': LOG_DIR / 'qlvm.log',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'django': {
            'handlers': ['console', 'qlvm_file'],
            'level': 'INFO',
            'propagate': True,
        },
        'qlvm': {
            'handlers': ['console', 'qlvm_file'],
            'level': 'DEBUG',
            'propagate': True,
        },
    },
}
