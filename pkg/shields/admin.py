from django.contrib import admin
from .models import StoredShield


@admin.register(StoredShield)
class StoredShieldAdmin(admin.ModelAdmin):
    list_display = ['run', 'name', 'variant', 'entry_count', 'created_at']
    list_filter = ['variant']
    exclude = ['payload']
