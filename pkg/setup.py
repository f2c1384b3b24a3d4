from setuptools import find_packages, setup

setup(
    name='cutseg',
    packages=find_packages(),
    version='0.1.0',
    description='Unsupervised anomaly segmentation with adversarial selective cuts',
    author='cutseg developers',
    license='BSD-3',
    python_requires='>=3.9',
    install_requires=[
        'numpy',
        'pandas',
        'matplotlib',
        'docopt',
        'torch>=2.1',
        'scipy',
        'scikit-image',
        'Pillow',
    ],
    extras_require={
        'test': ['hypothesis'],
    },
    entry_points={
        'console_scripts': ['cutseg=cutseg.cli:main'],
    },
)
