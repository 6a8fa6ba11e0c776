# -*- coding: utf-8 -*-
#
# django-dycaf documentation build configuration file.

extensions = []

templates_path = ['_templates']
source_suffix = '.txt'
master_doc = 'index'

project = u'django-dycaf'
copyright = u'2026, django-dycaf contributors'

version = '0.1'
release = '0.1.0'

exclude_patterns = ['_build']
pygments_style = 'sphinx'

html_theme = 'default'
html_static_path = []
htmlhelp_basename = 'django-dycafdoc'

latex_documents = [
    ('index', 'django-dycaf.tex', u'django-dycaf Documentation',
     u'django-dycaf contributors', 'manual'),
]
