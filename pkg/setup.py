import setuptools


# Load README to get long description.
with open('README.md') as f:
    _LONG_DESCRIPTION = f.read()


setuptools.setup(
    name='pavemind',
    version='0.0.1',
    description='Pavement maintenance decision engine',
    long_description=_LONG_DESCRIPTION,
    long_description_content_type='text/markdown',
    packages=setuptools.find_packages(exclude=['tests', 'examples']),
    install_requires=[
        'numpy',
        'pandas',
        'torch',
        'tqdm',
        'matplotlib',
        'scikit-learn',
        'scipy',
    ],
    extras_require={
        'test': ['pytest']
    },
    entry_points={
        'console_scripts': ['pavemind=pavemind.cli:main'],
    },
    classifiers=[
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ],
    keywords='pavement maintenance reinforcement-learning bayesian-network lstm',
)
