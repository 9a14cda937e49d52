from setuptools import setup

def readme():
    with open('README.md') as f:
        return f.read()

setup(name='gpfplume',
      version='0.1.0',
      description='Grow-Prune-Freeze Q-networks for odor plume navigation (gpfplume)',
      license='MIT',
      packages=['gpfplume'],
      install_requires=[
          'pandas', 'numpy', 'scipy', 'tqdm', 'omegaconf', 'pyyaml', 'torch'
      ],
      extras_require={'test': ['pytest']},
      entry_points={'console_scripts': ['gpfplume=gpfplume.cli:main']},
      zip_safe=False)
