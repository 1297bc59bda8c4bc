from django.apps import AppConfig


class ShieldsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'shields'
    verbose_name = 'Boucliers appris en ligne'
