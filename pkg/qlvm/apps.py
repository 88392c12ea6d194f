from django.apps import AppConfig


class QlvmConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'qlvm'
    verbose_name = '格点隐变量模型'
