from setuptools import setup, find_packages

setup(
    name='TrajMask',
    version='0.1.0',
    description='Masked trajectory modeling at desk scale: one bidirectional model over return, state and action '
                'tokens that serves behavior cloning, return-conditioned control, forward and inverse dynamics and '
                'state representations, selected purely by the input mask.',
    long_description=open('src/README.md').read(),
    long_description_content_type='text/markdown',
    packages=find_packages(where='src'),
    package_dir={'': 'src'},
    install_requires=[
        'numpy', 'scipy', 'pandas', 'reportlab~=4.3.1', 'openpyxl', 'pytest', 'coverage', 'setuptools'
    ],
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
    ],
    python_requires='>=3.8',
    entry_points={
        'console_scripts': [
            'trajmask = TrajMask.main:main',
        ],
    },
)
