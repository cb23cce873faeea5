import hypothesis
import numpy as np
from django.conf import settings

np.seterr(all='warn')

hypothesis.settings.register_profile('default', max_examples=25, deadline=None)
hypothesis.settings.register_profile('fast', max_examples=5, deadline=None)
hypothesis.settings.register_profile('thorough', max_examples=200, deadline=None)
hypothesis.settings.register_profile('debugger', report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(getattr(settings, 'HYPOTHESIS_PROFILE', 'default'))
